"""Simulation and reconstruction pipeline for multicore multimode fiber
snapshot spectral imaging."""

from .errors import CalibrationError, ConfigError, CorrelationError, FormatError, LayoutError, MCMMFError
from .frames import SpeckleFrame, read_pgm, write_pgm
from .optics import FiberSpec, SourceModel, WavelengthGrid, mode_count
from .clustering import CoreMap, DbscanParams, dbscan, extract_core_map
from .stm import Stm, calibrate, load_stm, save_stm, subsample
from .solver import L1Problem, solve_l1_nonneg, solve_batch

__version__ = "0.1.0"
