import os
from typing import Dict, Iterable, Optional

from dotenv import load_dotenv, dotenv_values

from errors import ConfigError

load_dotenv()

# 目录配置
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
RUNS_DIR = os.getenv("MOFFLE_RUNS_DIR", os.path.join(BASE_DIR, 'runs'))
DATABASE_PATH = os.getenv("MOFFLE_DATABASE_PATH", os.path.join(RUNS_DIR, 'run_index.db'))

# 日志与并行
LOG_LEVEL = os.getenv("MOFFLE_LOG_LEVEL", "INFO").upper()
MAX_WORKERS = int(os.getenv("MOFFLE_MAX_WORKERS", "1"))

# 服务配置
API_PORT = int(os.getenv("MOFFLE_API_PORT", "8000"))

# 数值容差
STOCHASTIC_TOL = 1e-9
LSQ_JITTER = 1e-10
BISECTION_TOL = 1e-8
BISECTION_MAX_ITER = 100
EIGEN_TOL = 1e-9
NORM_TOL = 1e-9

# 椭圆规划由公式推导出的迭代上限超过此值时拒绝运行
PLANNER_ITERATION_LIMIT = int(os.getenv("MOFFLE_PLANNER_ITERATION_LIMIT", "10000"))

# 实验默认值（空字符串表示由公式推导）
_DEFAULTS = {
    "env_path": "",
    "horizon": "3",
    "actions": "2",
    "states": "12",
    "latents": "3",
    "eta_floor": "0.05",
    "psi_kind": "dirichlet",
    "psi_concentration": "0.3",
    "nu_concentration": "0.3",
    "decoys": "3",
    "decoy_kinds": "permutation,simplex,noisy",
    "rewards": "3",
    "oracle": "eigen",
    "simplex_mode": "false",
    "discriminator_mode": "clipped",
    "n_phi_hat": "10000",
    "n_ell": "10000",
    "n_phi_bar": "10000",
    "n_plan": "10000",
    "epsilon": "0.1",
    "delta": "0.1",
    "beta": "",
    "epsilon_reg": "",
    "epsilon_apx": "",
    "eta_min": "",
    "feature_radius": "",
    "g_radius": "",
    "ridge_lambda": "",
    "search_restarts": "64",
    "search_steps": "200",
    "planner_max_iterations": "",
    "lag": "",
    "downstream_variant": "",
    "exact_data": "false",
    "max_workers": str(MAX_WORKERS),
    "seed": "7",
    "out": os.path.join(RUNS_DIR, "default"),
    "verify_coverage": "true",
    "verify_downstream": "true",
    "verify_determinism": "false",
}

# 环境变量 MOFFLE_<KEY> 可覆盖默认值
DEFAULTS: Dict[str, str] = {
    key: os.getenv(f"MOFFLE_{key.upper()}", value) for key, value in _DEFAULTS.items()
}


def parse_bool(value: str) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Dict[str, str]:
    """按 命令行覆盖 > 配置文件 > 默认值 的优先级合并实验配置"""
    merged = dict(DEFAULTS)

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"配置文件不存在: {path}")
        file_values = dotenv_values(path)
        unknown = sorted(set(file_values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"配置文件包含未知键: {', '.join(unknown)}")
        merged.update({k: (v or "") for k, v in file_values.items()})

    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"覆盖参数格式错误（应为 key=value）: {item}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"未知配置键: {key}")
        merged[key] = value.strip()

    return merged
