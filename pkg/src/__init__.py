# sphere-dsb: score-based generative models and Schrodinger bridges on S^2
__version__ = "0.1.0"
