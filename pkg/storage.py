import csv
import glob
import json
import logging
import os
import re
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from errors import ShapeMismatch
from function_spaces import FeatureClass, FeatureMap, RewardFunction
from mdp_core import AnyPolicy, LatentLowRankMDP, LevelData, TransitionDataset, WeightedTransitions, policy_from_dict

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["level", "t", "v_hat", "trace_gamma", "lambda_min_gamma", "floored"]


def format_float(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def _level_index(path: str) -> tuple:
    return tuple(int(n) for n in re.findall(r"\d+", os.path.basename(path)))


class RunDirectory:
    """运行目录的读写：env.json、features/、datasets/、cover.json、reports/、CSV 指标"""

    def __init__(self, root: str):
        self.root = root

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    def exists(self, *parts: str) -> bool:
        return os.path.exists(self.path(*parts))

    def _write_json(self, data: Any, *parts: str):
        path = self.path(*parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2, allow_nan=True)
        logger.debug(f"写入 {path}")

    def save_json(self, data: Any, *parts: str):
        self._write_json(data, *parts)

    def _read_json(self, *parts: str) -> Any:
        with open(self.path(*parts), "r", encoding="utf-8") as f:
            return json.load(f)

    # ---------- 环境 ----------
    def save_env(self, mdp: LatentLowRankMDP):
        self._write_json(mdp.to_dict(), "env.json")

    def load_env(self) -> LatentLowRankMDP:
        return LatentLowRankMDP.from_dict(self._read_json("env.json"))

    # ---------- 特征类 ----------
    def save_features(self, features: FeatureClass, folder: str = "features"):
        for h in range(features.horizon):
            for i, feature in enumerate(features.at(h)):
                self._write_json(feature.to_dict(), folder, f"level_{h}_{i}.json")
        sidecar = {"terminal_states": features.terminal_states,
                   "star_index": None if features.star_index is None else list(features.star_index)}
        self._write_json(sidecar, folder, "sidecar.json")
        logger.info(f"保存特征类: {self.path(folder)}")

    def load_features(self, folder: str = "features") -> FeatureClass:
        sidecar = self._read_json(folder, "sidecar.json")
        files = sorted(glob.glob(self.path(folder, "level_*_*.json")), key=_level_index)
        levels: List[List[FeatureMap]] = []
        for path in files:
            h, i = _level_index(path)
            while len(levels) <= h:
                levels.append([])
            if i != len(levels[h]):
                raise ShapeMismatch(f"特征文件编号不连续: {path}")
            with open(path, "r", encoding="utf-8") as f:
                levels[h].append(FeatureMap.from_dict(json.load(f)))
        star = sidecar.get("star_index")
        return FeatureClass(tuple(tuple(level) for level in levels), int(sidecar["terminal_states"]),
                            None if star is None else tuple(star))

    def save_learned(self, features: Sequence[FeatureMap], name: str = "phi_bar"):
        self._write_json([f.to_dict() for f in features], "learned", f"{name}.json")

    def load_learned(self, name: str = "phi_bar") -> List[FeatureMap]:
        return [FeatureMap.from_dict(d) for d in self._read_json("learned", f"{name}.json")]

    # ---------- 奖励 ----------
    def save_rewards(self, rewards: Sequence[RewardFunction]):
        self._write_json([r.to_dict() for r in rewards], "rewards.json")

    def load_rewards(self) -> List[RewardFunction]:
        return [RewardFunction.from_dict(d) for d in self._read_json("rewards.json")]

    # ---------- 数据集 ----------
    def save_datasets(self, datasets: Iterable[LevelData]):
        os.makedirs(self.path("datasets"), exist_ok=True)
        provenance = {}
        for data in datasets:
            weighted = isinstance(data, WeightedTransitions)
            path = self.path("datasets", f"level_{data.level}.csv")
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["level", "x", "a", "x_next"] + (["weight"] if weighted else []))
                for k in range(len(data.states)):
                    row = [data.level, int(data.states[k]), int(data.actions[k]), int(data.next_states[k])]
                    if weighted:
                        row.append(format_float(data.weights[k]))
                    writer.writerow(row)
            provenance[str(data.level)] = dict(data.provenance)
        self._write_json(provenance, "datasets", "provenance.json")

    def load_datasets(self) -> List[LevelData]:
        provenance = {}
        if self.exists("datasets", "provenance.json"):
            provenance = self._read_json("datasets", "provenance.json")
        out: List[LevelData] = []
        for path in sorted(glob.glob(self.path("datasets", "level_*.csv")), key=_level_index):
            with open(path, "r", encoding="utf-8") as f:
                reader = csv.reader(f)
                header = next(reader)
                rows = [r for r in reader]
            level = _level_index(path)[0]
            table = np.array([[int(v) for v in r[:4]] for r in rows], dtype=np.int64).reshape(-1, 4)
            meta = provenance.get(str(level), {})
            if "weight" in header:
                weights = np.array([float(r[4]) for r in rows])
                out.append(WeightedTransitions(level, table[:, 1], table[:, 2], table[:, 3], weights, None, meta))
            else:
                out.append(TransitionDataset(level, table[:, 1], table[:, 2], table[:, 3], meta))
        return out

    # ---------- 策略与覆盖 ----------
    def save_policy(self, policy: AnyPolicy, name: str):
        self._write_json(policy.to_dict(), "policies", f"{name}.json")

    def load_policy(self, name: str) -> AnyPolicy:
        return policy_from_dict(self._read_json("policies", f"{name}.json"))

    def save_cover(self, cover_dict: Mapping[str, Any]):
        self._write_json(cover_dict, "cover.json")

    def load_cover(self) -> Dict[str, Any]:
        return self._read_json("cover.json")

    # ---------- 报告与指标 ----------
    def save_report(self, name: str, data: Any):
        self._write_json(data, "reports", f"{name}.json")

    def load_report(self, name: str) -> Any:
        return self._read_json("reports", f"{name}.json")

    def write_metrics(self, metrics: Mapping[str, Any], name: str = "metrics.csv"):
        path = self.path(name)
        os.makedirs(self.root, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["name", "value"])
            for key in sorted(metrics):
                writer.writerow([key, format_float(metrics[key])])
        logger.info(f"写入指标 {path}（{len(metrics)} 项）")

    def read_metrics(self, name: str = "metrics.csv") -> Dict[str, float]:
        with open(self.path(name), "r", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            return {row["name"]: float(row["value"]) for row in reader}

    def write_trace(self, rows: Iterable[Mapping[str, Any]], name: str = "planner_trace.csv"):
        path = self.path(name)
        os.makedirs(self.root, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_COLUMNS)
            for row in rows:
                writer.writerow([format_float(row[c]) for c in TRACE_COLUMNS])


def load_json_file(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_reward_file(path: str, index: Optional[int] = 0) -> RewardFunction:
    """读取单个奖励文件；rewards.json 列表时取第 index 个"""
    data = load_json_file(path)
    if isinstance(data, list):
        data = data[index or 0]
    return RewardFunction.from_dict(data)
