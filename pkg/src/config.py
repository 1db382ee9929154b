# config.py
import os
import sys
import json
import logging
from typing import Dict, List, Optional
from functools import lru_cache

import structlog
from dotenv import load_dotenv

logger = logging.getLogger(__name__)


class Config:
    """Numerical and runtime settings read from the environment (and an optional .env file)"""

    def __init__(self):
        load_dotenv()

        # Environment settings
        self.ENV = os.getenv('ENV', 'production')
        self.LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

        self._load_configuration()

    def _load_configuration(self):
        """Load all numerical configuration values"""
        self._dense_cap = self._load_int('DENSE_CAP', 4096)
        self._quadrature_nodes = self._load_int('QUADRATURE_NODES', 96)  # 64 is too coarse for thetad near 4
        self._is_samples = self._load_int('IS_SAMPLES', 4096)
        self._is_max_n = self._load_int('IS_MAX_N', 8)
        self._newton_max_iter = self._load_int('NEWTON_MAX_ITER', 50)
        self._newton_tol = self._load_float('NEWTON_TOL', 1e-8)
        self._gram_floor = self._load_float('GRAM_FLOOR', 0.1)
        self._workers = self._load_int('SUBSET_MLE_WORKERS', -1)

        seed = os.getenv('SUBSET_MLE_SEED')
        self._seed_override = None
        if seed:
            try:
                self._seed_override = int(seed.split('#')[0].strip())
            except ValueError:
                logger.warning("Invalid SUBSET_MLE_SEED value, ignoring override")

        logger.info(f"Numerical settings loaded: dense_cap={self._dense_cap}, "
                    f"quadrature_nodes={self._quadrature_nodes}, is_samples={self._is_samples}")

        self._default_theta0 = self._load_json_config(
            'DEFAULT_THETA0',
            default={
                'lmm': [1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 0.3],
                'mglmm': [0.5, -0.5, 0.3, 0.2, 1.0],
                'toy': [0.0],
            }
        )

    def _load_int(self, env_var: str, default: int) -> int:
        # Strip any comments and whitespace
        raw = os.getenv(env_var, str(default)).split('#')[0].strip()
        try:
            return int(raw)
        except ValueError:
            logger.warning(f"Invalid {env_var} value, using default {default}")
            return default

    def _load_float(self, env_var: str, default: float) -> float:
        raw = os.getenv(env_var, str(default)).split('#')[0].strip()
        try:
            return float(raw)
        except ValueError:
            logger.warning(f"Invalid {env_var} value, using default {default}")
            return default

    def _load_json_config(self, env_var: str, default: Dict = None) -> Dict:
        """
        Load and parse JSON configuration from environment variables

        Args:
            env_var: Name of environment variable
            default: Default value if env var is not set or invalid
        Returns:
            Parsed configuration or default value
        """
        try:
            value = os.getenv(env_var)
            if not value:
                return default if default is not None else {}
            return json.loads(value)
        except json.JSONDecodeError:
            logger.warning(f"Invalid JSON in {env_var}, using default")
            return default if default is not None else {}

    # Properties
    @property
    def DENSE_CAP(self) -> int:
        return self._dense_cap

    @property
    def QUADRATURE_NODES(self) -> int:
        return self._quadrature_nodes

    @property
    def IS_SAMPLES(self) -> int:
        return self._is_samples

    @property
    def IS_MAX_N(self) -> int:
        return self._is_max_n

    @property
    def NEWTON_MAX_ITER(self) -> int:
        return self._newton_max_iter

    @property
    def NEWTON_TOL(self) -> float:
        return self._newton_tol

    @property
    def GRAM_FLOOR(self) -> float:
        return self._gram_floor

    @property
    def WORKERS(self) -> int:
        return self._workers

    @property
    def SEED_OVERRIDE(self) -> Optional[int]:
        return self._seed_override

    @property
    def DEFAULT_THETA0(self) -> Dict[str, List[float]]:
        return self._default_theta0


@lru_cache()
def get_config() -> Config:
    """Process-wide configuration instance"""
    return Config()


def configure_logging(level: Optional[str] = None):
    """structlog setup shared by the CLI and worker processes; events go to stderr as JSON"""
    level = (level or get_config().LOG_LEVEL).upper()
    numeric = logging.getLevelName(level)
    if not isinstance(numeric, int):
        numeric = logging.INFO
    logging.basicConfig(level=numeric, stream=sys.stderr, format="%(message)s")
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            structlog.processors.JSONRenderer()
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric),
        logger_factory=structlog.PrintLoggerFactory(sys.stderr),
        cache_logger_on_first_use=False,
    )
