# Tests for sphere-dsb
