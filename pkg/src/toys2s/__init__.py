"""Toy subseasonal-to-seasonal forecasting testbed.

Modules: gridstore (archives and climatologies), metrics, indices, toyearth
(the truth system), forecaster (the surrogate), ensemble, harness and cli.
"""

__version__ = "0.1.0"
