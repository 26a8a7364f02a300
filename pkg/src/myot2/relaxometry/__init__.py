"""Per-pixel T2 relaxometry."""
from .fitting import (
    BACKEND, BACKENDS, FitConfig, PixelFit, fit_signals, fit_t2_map, fit_t2_pixel,
    fit_t2_volume, oracle_grid, oracle_grid_fit, oracle_grid_fit_many, profiled_residual,
    resolve_threads,
)
from .volume import (
    T2_WINDOW_MS, MultiEchoVolume, T2Map, center_crop, center_crop_array, crop_bounds,
    normalize_minmax, truncate_window,
)

__all__ = [
    "BACKEND", "BACKENDS", "FitConfig", "PixelFit", "fit_signals", "fit_t2_map",
    "fit_t2_pixel", "fit_t2_volume", "oracle_grid", "oracle_grid_fit", "oracle_grid_fit_many",
    "profiled_residual",
    "resolve_threads", "T2_WINDOW_MS", "MultiEchoVolume", "T2Map", "center_crop",
    "center_crop_array", "crop_bounds", "normalize_minmax", "truncate_window",
]
