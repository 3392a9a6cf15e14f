"""Few-step consistency students for deep equilibrium models."""

from .backbone import BackboneParams, ReadoutHead, Teacher, TeacherConfig, equilibrium, train_teacher
from .consistency import BoundaryCoeffs, InferenceSchedule, StudentParams, g_phi, h_phi, infer, init_student, p_phi_aa
from .datasets import Dataset, make_dataset
from .distill import DistillConfig, LossConfig, StudentModel, distill
from .errors import (
    CacheError,
    CDEQError,
    DegenerateStateError,
    DivergenceError,
    IllConditionedError,
    NumericalError,
    ShapeError,
    ValidationError,
)
from .solver import SolverConfig, anderson_step, solve
from .trajectory import AugmentConfig, TimeMap, Trajectory, sample_trajectories

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "BackboneParams", "BoundaryCoeffs", "CacheError", "CDEQError", "Dataset",
    "DegenerateStateError", "DistillConfig", "DivergenceError", "IllConditionedError", "InferenceSchedule",
    "LossConfig", "NumericalError", "ReadoutHead", "ShapeError", "SolverConfig", "StudentModel", "StudentParams",
    "Teacher", "TeacherConfig", "TimeMap", "Trajectory", "ValidationError", "anderson_step", "distill",
    "equilibrium", "g_phi", "h_phi", "infer", "init_student", "make_dataset", "p_phi_aa", "sample_trajectories",
    "solve", "train_teacher",
]
