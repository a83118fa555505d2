import os
from dataclasses import dataclass, field
from dotenv import load_dotenv

load_dotenv()

@dataclass
class AttackConfigDefaults:
    batch_size: int = int(os.getenv("QEBA_BATCH_SIZE", "100"))
    # geometric back-off cap for the gradient step
    step_halvings: int = int(os.getenv("QEBA_STEP_HALVINGS", "20"))
    # empty means m^(-3/2), which pairs with delta_t = dist/m
    theta: str = os.getenv("QEBA_THETA", "")
    log_every: int = int(os.getenv("QEBA_LOG_EVERY", "25"))

@dataclass
class PcaConfig:
    oversample: int = int(os.getenv("QEBA_PCA_OVERSAMPLE", "10"))
    power_iters: int = int(os.getenv("QEBA_PCA_POWER_ITERS", "2"))
    shard_rows: int = int(os.getenv("QEBA_SHARD_ROWS", "256"))

@dataclass
class ExperimentDefaults:
    # MSE curves are resampled on a fixed query grid
    grid_step: int = int(os.getenv("QEBA_GRID_STEP", "100"))
    workers: int = int(os.getenv("QEBA_WORKERS", "2"))

@dataclass
class AppConfig:
    log_level: str = os.getenv("QEBA_LOG_LEVEL", "INFO")
    output_dir: str = os.getenv("QEBA_OUTPUT_DIR", os.path.join(os.getcwd(), "results"))
    input_dir: str = os.path.join(os.getcwd(), "data", "input")
    log_file: str = os.getenv("QEBA_LOG_FILE", os.path.join(os.getcwd(), "logs", "qeba.log"))

@dataclass
class Settings:
    attack: AttackConfigDefaults = field(default_factory=AttackConfigDefaults)
    pca: PcaConfig = field(default_factory=PcaConfig)
    experiment: ExperimentDefaults = field(default_factory=ExperimentDefaults)
    app: AppConfig = field(default_factory=AppConfig)

settings = Settings()
