"""
Drift networks (t, x) -> tangent vector at x, with hand-written derivatives.

Architecture: input u = [x (3), sin/cos(2^j pi t / T) for j < K] -> 4 hidden
affine+SiLU blocks of width W -> affine to R^3 -> projection head
out = y - <y, x> x.

Derivatives:
  - trace() runs the primal pass and, for each input direction d, the tangent
    (forward-mode) pass carrying dz, dh, dy alongside; the recorded Tape holds
    everything backward() needs.
  - backward() is reverse-over-forward: adjoints flow through the primal and the
    tangent activations together, so gradients of losses containing
    <D_d out, d> (the divergence term) are exact. SiLU's second derivative enters
    through dh = s'(z) dz.

Parameters live in one flat float64 array; weights/biases are views into it.
Layout per layer: W (out x in, row-major) then b (out).

Checkpoint file (little-endian):
  header  "<4sIIIdQ8s" = magic b"SDSB", format version, width W, time features K,
          horizon T, param_count, activation name (ASCII, NUL-padded)
  body    param_count float64 values
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptFile, FormatMismatch, NonFiniteGradient, ShapeMismatch, StaleTape

DEFAULT_WIDTH = 128
FULL_WIDTH = 512
DEFAULT_TIME_FEATURES = 8
HIDDEN_LAYERS = 4
DEFAULT_ACTIVATION = "silu"

FORMAT_MAGIC = b"SDSB"
FORMAT_VERSION = 2
_HEADER = struct.Struct("<4sIIIdQ8s")

DEFAULT_LR = 2e-4
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8
DEFAULT_CLIP = 10.0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split keeps exp() from overflowing for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _silu(z):
    return z * _sigmoid(z)


def _silu_d1(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _silu_d2(z):
    s = _sigmoid(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


def _identity(z):
    return z


def _ones(z):
    return np.ones_like(z)


def _zeros(z):
    return np.zeros_like(z)


# name -> (sigma, sigma', sigma''); piecewise-linear activations are excluded
ACTIVATIONS: Dict[str, Tuple[Callable, Callable, Callable]] = {
    "silu": (_silu, _silu_d1, _silu_d2),
    "identity": (_identity, _ones, _zeros),
}


def time_features(t, T: float, K: int) -> np.ndarray:
    """(B,) or scalar t -> (B, 2K) features [sin(2^j pi t/T), cos(2^j pi t/T)]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = (2.0 ** np.arange(K)) * np.pi / T
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def layer_dims(width: int, time_features_k: int) -> List[Tuple[int, int]]:
    """(out, in) per affine layer."""
    d_in = 3 + 2 * time_features_k
    dims = [(width, d_in)]
    dims += [(width, width)] * (HIDDEN_LAYERS - 1)
    dims.append((3, width))
    return dims


def param_count(width: int, time_features_k: int) -> int:
    return sum(o * i + o for o, i in layer_dims(width, time_features_k))


def _inner(u, v):
    return np.sum(u * v, axis=-1)


@dataclass
class Tape:
    """Activations of one trace() call, tied to the parameter version they saw."""

    model_id: int
    version: int
    x: np.ndarray
    hs: List[np.ndarray]  # hs[0] = u, hs[l+1] = sigma(zs[l])
    zs: List[np.ndarray]
    y: np.ndarray
    out: np.ndarray
    directions: List[np.ndarray] = field(default_factory=list)
    dhs: List[List[np.ndarray]] = field(default_factory=list)
    dzs: List[List[np.ndarray]] = field(default_factory=list)
    dys: List[np.ndarray] = field(default_factory=list)
    douts: List[np.ndarray] = field(default_factory=list)


class DriftModel:
    """f_theta / b_phi: (t, x) -> tangent vector at x."""

    def __init__(
        self,
        width: int = DEFAULT_WIDTH,
        time_features_k: int = DEFAULT_TIME_FEATURES,
        T: float = 1.0,
        activation: str = DEFAULT_ACTIVATION,
        params: Optional[np.ndarray] = None,
    ) -> None:
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        self.width = int(width)
        self.time_features_k = int(time_features_k)
        self.T = float(T)
        self.activation = activation
        self._act, self._act_d1, self._act_d2 = ACTIVATIONS[activation]
        self.dims = layer_dims(self.width, self.time_features_k)
        n = param_count(self.width, self.time_features_k)
        if params is None:
            self.params = np.zeros(n, dtype=np.float64)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ShapeMismatch(f"expected {n} parameters, got {params.shape}", expected=n)
            self.params = params.copy()
        self.grad = np.zeros(n, dtype=np.float64)
        self.weights, self.biases = self.split(self.params)
        # bumped on every parameter change; tapes from older versions are stale
        self.version = 0

    # ---------------------------
    # construction
    # ---------------------------

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        width: int = DEFAULT_WIDTH,
        time_features_k: int = DEFAULT_TIME_FEATURES,
        T: float = 1.0,
        activation: str = DEFAULT_ACTIVATION,
    ) -> "DriftModel":
        """Fan-in scaled normal hidden weights, zero biases, zero output layer: a zero drift."""
        model = cls(width, time_features_k, T, activation)
        for w in model.weights[:-1]:
            w[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[1])
        return model

    def split(self, flat: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """Weight/bias views into a flat array laid out like params."""
        weights, biases = [], []
        offset = 0
        for o, i in self.dims:
            weights.append(flat[offset:offset + o * i].reshape(o, i))
            offset += o * i
            biases.append(flat[offset:offset + o])
            offset += o
        return weights, biases

    @property
    def param_count(self) -> int:
        return int(self.params.size)

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise ShapeMismatch(f"expected {self.params.shape} parameters, got {values.shape}")
        self.params[...] = values
        self.version += 1

    def copy(self) -> "DriftModel":
        return DriftModel(self.width, self.time_features_k, self.T, self.activation, params=self.params)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    # ---------------------------
    # evaluation
    # ---------------------------

    def _inputs(self, t, x: np.ndarray) -> np.ndarray:
        B = x.shape[0]
        feats = time_features(t, self.T, self.time_features_k)
        if feats.shape[0] == 1 and B != 1:
            feats = np.broadcast_to(feats, (B, feats.shape[1]))
        return np.concatenate([x, feats], axis=1)

    def trace(self, t, x: np.ndarray, directions: Sequence[np.ndarray] = ()) -> Tape:
        """Primal pass plus one tangent pass per input direction (ambient 3-vectors)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        dirs = [np.broadcast_to(np.atleast_2d(np.asarray(d, dtype=np.float64)), x.shape) for d in directions]
        u = self._inputs(t, x)
        hs, zs = [u], []
        dhs = [[np.concatenate([d, np.zeros((x.shape[0], u.shape[1] - 3))], axis=1)] for d in dirs]
        dzs: List[List[np.ndarray]] = [[] for _ in dirs]
        h = u
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w.T + b
            zs.append(z)
            h = self._act(z)
            hs.append(h)
            if dirs:
                s1 = self._act_d1(z)
                for j in range(len(dirs)):
                    dz = dhs[j][-1] @ w.T
                    dzs[j].append(dz)
                    dhs[j].append(s1 * dz)
        w_out, b_out = self.weights[-1], self.biases[-1]
        y = h @ w_out.T + b_out
        yx = _inner(y, x)[:, None]
        out = y - yx * x
        dys, douts = [], []
        for j, d in enumerate(dirs):
            dy = dhs[j][-1] @ w_out.T
            dys.append(dy)
            douts.append(dy - (_inner(dy, x) + _inner(y, d))[:, None] * x - yx * d)
        return Tape(id(self), self.version, x, hs, zs, y, out, list(dirs), dhs, dzs, dys, douts)

    def forward(self, t, x: np.ndarray) -> np.ndarray:
        single = np.ndim(x) == 1
        out = self.trace(t, x).out
        return out[0] if single else out

    __call__ = forward

    def forward_jvp(self, t, x: np.ndarray, direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(forward value, ambient directional derivative along direction incl. the projection head)."""
        single = np.ndim(x) == 1
        tape = self.trace(t, x, [direction])
        if single:
            return tape.out[0], tape.douts[0][0]
        return tape.out, tape.douts[0]

    def at_time(self, t: float) -> "TimeSlice":
        return TimeSlice(self, t)

    # ---------------------------
    # gradients
    # ---------------------------

    def backward(
        self,
        tape: Tape,
        out_bar: np.ndarray,
        dout_bars: Optional[Sequence[np.ndarray]] = None,
        grad: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """
        Accumulate d(loss)/d(theta) into `grad` (default self.grad) given adjoints
        of tape.out and of each tape.douts[j]. Returns the adjoint of the input
        point x (primal-only tapes; with directions it omits second-order terms
        in x, which training never needs).
        """
        if tape.model_id != id(self) or tape.version != self.version:
            raise StaleTape(
                "tape was recorded for different parameters",
                tape_version=tape.version,
                model_version=self.version,
            )
        dout_bars = list(dout_bars or [])
        if len(dout_bars) not in (0, len(tape.directions)):
            raise ShapeMismatch("one adjoint per traced direction expected")
        if not dout_bars:
            dout_bars = [np.zeros_like(tape.x) for _ in tape.directions]
        grad = self.grad if grad is None else grad
        g_w, g_b = self.split(grad)
        x, y = tape.x, tape.y
        out_bar = np.atleast_2d(out_bar)

        # projection head: out = P(x) y ; dout = P(x) dy - <y,d> x - <y,x> d
        y_bar = out_bar - _inner(out_bar, x)[:, None] * x
        dy_bars = []
        for d, db in zip(tape.directions, dout_bars):
            db = np.atleast_2d(db)
            y_bar = y_bar - _inner(x, db)[:, None] * d - _inner(d, db)[:, None] * x
            dy_bars.append(db - _inner(db, x)[:, None] * x)

        n_dir = len(tape.directions)
        w_out = self.weights[-1]
        h_last = tape.hs[-1]
        g_w[-1] += y_bar.T @ h_last
        for j in range(n_dir):
            g_w[-1] += dy_bars[j].T @ tape.dhs[j][-1]
        g_b[-1] += y_bar.sum(axis=0)
        h_bar = y_bar @ w_out
        dh_bars = [dy_bars[j] @ w_out for j in range(n_dir)]

        for layer in reversed(range(len(self.weights) - 1)):
            z = tape.zs[layer]
            s1 = self._act_d1(z)
            z_bar = h_bar * s1
            dz_bars = []
            if n_dir:
                s2 = self._act_d2(z)
                for j in range(n_dir):
                    z_bar = z_bar + dh_bars[j] * s2 * tape.dzs[j][layer]
                    dz_bars.append(dh_bars[j] * s1)
            g_w[layer] += z_bar.T @ tape.hs[layer]
            for j in range(n_dir):
                g_w[layer] += dz_bars[j].T @ tape.dhs[j][layer]
            g_b[layer] += z_bar.sum(axis=0)
            w = self.weights[layer]
            h_bar = z_bar @ w
            dh_bars = [dz_bars[j] @ w for j in range(n_dir)]

        yx = _inner(y, x)[:, None]
        return h_bar[:, :3] - _inner(x, out_bar)[:, None] * y - yx * out_bar

    # ---------------------------
    # checkpoints
    # ---------------------------

    def save(self, path: Path) -> Path:
        return save(self, path)


class TimeSlice:
    """x -> model(t, x) at fixed t, with jvp for manifold.divergence."""

    def __init__(self, model, t: float) -> None:
        self.model = model
        self.t = t

    def __call__(self, x):
        return self.model(self.t, x)

    def jvp(self, x, d):
        return self.model.forward_jvp(self.t, x, d)


class ZeroDrift:
    """The identically-zero drift f^0."""

    def __init__(self, T: float = 1.0) -> None:
        self.T = float(T)

    def __call__(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    forward = __call__

    def forward_jvp(self, t, x, direction):
        z = np.zeros_like(np.asarray(x, dtype=np.float64))
        return z, z.copy()

    def at_time(self, t: float) -> TimeSlice:
        return TimeSlice(self, t)


# ---------------------------
# optimizer
# ---------------------------


@dataclass
class OptimizerState:
    """Adam moments for one model; fresh per training phase."""

    m: np.ndarray
    v: np.ndarray
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS
    clip: Optional[float] = DEFAULT_CLIP
    step: int = 0

    @classmethod
    def for_model(cls, model: DriftModel, lr: float = DEFAULT_LR, beta1: float = DEFAULT_BETAS[0],
                  beta2: float = DEFAULT_BETAS[1], eps: float = DEFAULT_EPS,
                  clip: Optional[float] = DEFAULT_CLIP) -> "OptimizerState":
        n = model.param_count
        return cls(np.zeros(n), np.zeros(n), lr, beta1, beta2, eps, clip)


def optimizer_step(model: DriftModel, opt: OptimizerState) -> float:
    """Adam update from model.grad (clipped to global norm opt.clip); clears grads. Returns the pre-clip norm."""
    g = model.grad
    if opt.m.shape != g.shape:
        raise ShapeMismatch("optimizer moments do not match model parameters")
    finite = np.isfinite(g)
    if not finite.all():
        bad = np.flatnonzero(~finite)
        raise NonFiniteGradient(
            "non-finite gradient; step aborted",
            bad_count=int(bad.size),
            first_bad_index=int(bad[0]),
            opt_step=opt.step,
        )
    norm = float(np.linalg.norm(g))
    if opt.clip is not None and norm > opt.clip:
        g = g * (opt.clip / norm)
    opt.step += 1
    opt.m[...] = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    opt.v[...] = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
    model.params -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    model.version += 1
    model.zero_grad()
    return norm


# ---------------------------
# checkpoint I/O
# ---------------------------


def save(model: DriftModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, model.width, model.time_features_k, model.T,
                          model.param_count, model.activation.encode("ascii"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(model.params.astype("<f8").tobytes())
    tmp.replace(path)
    return path


def load(
    path: Path,
    width: Optional[int] = None,
    time_features_k: Optional[int] = None,
    T: Optional[float] = None,
    activation: Optional[str] = None,
) -> DriftModel:
    """Read a checkpoint; expected (width, K, T, activation), when given, must match the header."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFile(f"{path}: truncated header", path=str(path))
    magic, version, w, k, t_horizon, count, act_raw = _HEADER.unpack_from(raw, 0)
    if magic != FORMAT_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}", path=str(path))
    if version != FORMAT_VERSION:
        raise FormatMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}", path=str(path))
    if width is not None and w != width:
        raise FormatMismatch(f"{path}: width {w}, expected {width}", path=str(path))
    if time_features_k is not None and k != time_features_k:
        raise FormatMismatch(f"{path}: time features {k}, expected {time_features_k}", path=str(path))
    if T is not None and t_horizon != T:
        raise FormatMismatch(f"{path}: horizon {t_horizon}, expected {T}", path=str(path))
    stored_act = act_raw.rstrip(b"\0").decode("ascii", errors="replace")
    if stored_act not in ACTIVATIONS:
        raise CorruptFile(f"{path}: unknown activation {stored_act!r}", path=str(path))
    if activation is not None and stored_act != activation:
        raise FormatMismatch(f"{path}: activation {stored_act}, expected {activation}", path=str(path))
    if count != param_count(w, k):
        raise CorruptFile(f"{path}: param_count {count} inconsistent with width {w}, K {k}", path=str(path))
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise CorruptFile(f"{path}: expected {8 * count} parameter bytes, found {len(body)}", path=str(path))
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return DriftModel(w, k, t_horizon, stored_act, params=params)
