"""Free vibration of the plate without fluid.

A single Fourier mode is released from rest; the one-step map fitted to
its trajectory gives complex rates that should sit on the roots of the
quadratic dispersion relation.
"""
import numpy as np

from shellfsi.shell import ShellParams, measure_dispersion

p = ShellParams()
for mode in [(1, 0), (1, 1), (2, 0)]:
    r = measure_dispersion(p, 16, mode=mode, dt=1e-4)
    m = r.measured[np.argmax(r.measured.imag)]
    e = r.exact[np.argmax(r.exact.imag)]
    print(f"mode {mode}: measured {m.real:9.4f} {m.imag:+9.4f}i   "
          f"exact {e.real:9.4f} {e.imag:+9.4f}i   rel. error {r.rel_error:.1e}")
