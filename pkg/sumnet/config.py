import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

# Network geometry
POOL_DIVISOR = 32
VGG11_STAGES = [[64], [128], [256, 256], [512, 512], [512, 512]]
STEM_CHANNELS = 3

# Training defaults
DEFAULT_LR = 1e-3
DEFAULT_BATCH_SIZE = 14
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS_ADAM = 1e-8
DEFAULT_THRESHOLD = 0.5

# Loss weighting
DEFAULT_W0 = 10.0
DEFAULT_SIGMA = 5.0
PROB_CLAMP = 1e-7

# Reference timings quoted for the published network (seconds)
PUBLISHED_GPU_SEC_PER_FRAME = 0.035
PUBLISHED_CPU_SEC_PER_FRAME = 0.070
PUBLISHED_SEC_PER_VOLUME = 13.44
REFERENCE_FRAME_HW = (256, 384)

# Checkpoint / volume containers
CHECKPOINT_MAGIC = b"SUMN"
CHECKPOINT_VERSION = 1
VOLUME_MAGIC = b"USVL"
VOLUME_VERSION = 1


def get_setting(key, default=None):
    # SUMNET_<KEY> from the environment, then the default
    env_key = f"SUMNET_{key.upper()}"
    val = os.getenv(env_key)
    if val is None or val == "":
        return default
    return val


def float_dtype():
    name = get_setting("FLOAT_DTYPE", "float64")
    if name not in ("float64", "float32"):
        raise ConfigError(f"SUMNET_FLOAT_DTYPE must be float64 or float32, got {name!r}")
    return name


def default_n_jobs():
    try:
        return int(get_setting("N_JOBS", 1))
    except ValueError:
        raise ConfigError("SUMNET_N_JOBS must be an integer")


@dataclass
class TrainConfig:
    manifest: str = ""
    checkpoint_dir: str = "checkpoints"
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = 1
    seed: int = 0
    w0: float = DEFAULT_W0
    sigma: float = DEFAULT_SIGMA
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps_adam: float = DEFAULT_EPS_ADAM
    fold: str = "all"
    threshold: float = DEFAULT_THRESHOLD
    structure: str = ""
    base_width: int = 64
    folds: int = 0
    max_steps: int = 0
    resume: str = ""
    log_every: int = 10
    extra: dict = field(default_factory=dict, repr=False)

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("beta1", "beta2"):
            val = getattr(self, name)
            if not 0 <= val < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {val}")
        if self.eps_adam <= 0:
            raise ConfigError("eps_adam must be > 0")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.w0 < 0:
            raise ConfigError(f"w0 must be >= 0, got {self.w0}")
        if not 0 <= self.threshold <= 1:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        if self.fold != "all":
            try:
                int(self.fold)
            except ValueError:
                raise ConfigError(f"fold must be an integer or 'all', got {self.fold!r}")
        return self

    def fold_index(self):
        return None if self.fold == "all" else int(self.fold)


def _coerce(name, raw, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}")
    return raw


def parse_config_text(text, base_dir=None):
    """
    Parse key=value lines into a TrainConfig.
    Blank lines and '#' comments are skipped, relative paths resolve against base_dir.
    """
    kinds = {f.name: f.type for f in fields(TrainConfig) if f.name != "extra"}
    type_map = {"int": int, "float": float, "str": str, int: int, float: float, str: str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, type_map.get(kinds[key], str))

    cfg = TrainConfig(**values)
    if base_dir:
        for key in ("manifest", "checkpoint_dir", "resume"):
            val = getattr(cfg, key)
            if val and not os.path.isabs(val):
                setattr(cfg, key, os.path.normpath(os.path.join(base_dir, val)))
    return cfg.validate()


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_config_text(text, base_dir=os.path.dirname(os.path.abspath(path)))


# Viewer styling
GLOBAL_STYLES = """
<style>
#MainMenu {visibility: hidden;}
footer {visibility: hidden;}
.stAppDeployButton {display:none;}
:root {
    --primary-green: #3FD18A;
    --primary-red: #FF4655;
    --bg-dark: #10161C;
    --card-bg: #1C252E;
    --text-main: #E6E8EA;
    --text-dim: #8B97A5;
}
.stApp {
    background-color: var(--bg-dark);
    color: var(--text-main);
    font-family: 'Inter', sans-serif;
}
.main-header {
    color: var(--primary-green);
    letter-spacing: 2px;
    text-transform: uppercase;
}
.metric-table {
    width: 100%;
    border-collapse: separate;
    border-spacing: 0 4px;
    margin: 20px 0;
}
.metric-table th {
    text-align: left;
    padding: 10px 16px;
    background: var(--card-bg);
    color: var(--text-dim);
    font-size: 0.8rem;
    border-bottom: 2px solid var(--primary-green);
    text-transform: uppercase;
}
.metric-table td {
    padding: 12px 16px;
    background: rgba(255, 255, 255, 0.03);
    color: var(--text-main);
    font-size: 0.95rem;
}
</style>
"""
