"""JSON run configuration with strict key checking."""

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ValidationError


@dataclass
class DataSection:
    name: str = "two_moons"
    n: int = 1000
    noise: float = 0.15
    seed: int = 0
    val_fraction: float = 0.2


@dataclass
class SolverSection:
    m: int = 5
    beta: float = 1.0
    max_iter: int = 100
    tol: float = 1e-6
    ridge: float = 1e-8


@dataclass
class TeacherSection:
    d_z: int = 16
    activation: str = "tanh"
    sigma_max: float = 0.9
    contractive: bool = True
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 100
    eval_iterations: int = 20


@dataclass
class TrajectorySection:
    K: int = 20
    eps: float = 0.0
    T: float = 1.0
    rho: float = 0.25
    p_aug: float = 0.1
    k_min: int = 1
    k_tail: int = 2
    init: str = "zeros"


@dataclass
class DistillSection:
    lambda1: float = 0.8
    lambda2: float = 0.05
    metric: str = "mse"
    mu: float = 0.99
    k_task_max: int = None
    lr: float = 3e-3
    batch_size: int = 64
    epochs: int = 200
    d_t: int = 4
    gamma: float = 1.0
    init_noise: float = 1e-3
    beta_sched: float = 0.5
    beta_aa: float = 1.0
    ridge: float = 1e-8
    anchor_k_min: int = 0


@dataclass
class EvalSection:
    nfe: list = field(default_factory=lambda: [1, 2, 3, 5, 10])
    max_steps: int = 10
    teacher_iterations: int = 20


@dataclass
class AblationSection:
    lambda1: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    lambda2: list = field(default_factory=lambda: [0.0, 0.05])
    nfe: int = 5
    epochs: int = None  # defaults to distill.epochs


SECTIONS = {
    "data": DataSection,
    "solver": SolverSection,
    "teacher": TeacherSection,
    "trajectory": TrajectorySection,
    "distill": DistillSection,
    "eval": EvalSection,
    "ablation": AblationSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    solver: SolverSection = field(default_factory=SolverSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self):
        return asdict(self)


def _section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ValidationError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    return cls(**raw)


def config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ValidationError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _section(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ValidationError("seed must be an integer")
    return RunConfig(seed=seed, **kwargs)


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
