import argparse
import logging
import sys
from typing import List, Optional

from config import LOG_LEVEL, load_config

# 配置日志
logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

from database import RunStore
from errors import ConfigError, StageError
from harness import STAGES, ExperimentConfig, run

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moffle", description="低秩MDP表示学习与无奖励探索实验工具")
    parser.add_argument("subcommand", choices=STAGES + ("serve",), help="流水线阶段或 serve")
    parser.add_argument("--config", default=None, help="key=value 格式的配置文件")
    parser.add_argument("--seed", default=None, help="主随机种子")
    parser.add_argument("--out", default=None, help="运行目录")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="覆盖配置项，可重复")
    parser.add_argument("--port", type=int, default=None, help="serve 使用的端口")
    parser.add_argument("--no-ledger", action="store_true", help="不写入运行记录数据库")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    if args.subcommand == "serve":
        from main_api import main as serve

        if args.port is not None:
            serve(args.port)
        else:
            serve()
        return EXIT_OK

    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")

    try:
        config = ExperimentConfig(load_config(args.config, overrides))
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        return EXIT_USAGE

    store = None if args.no_ledger else RunStore()
    try:
        report = run(config, args.subcommand, store)
    except StageError as e:
        logger.error(f"阶段 {e.stage} 失败: {e}")
        return EXIT_FAILED
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        return EXIT_USAGE

    print(f"阶段 {report.stage} 完成: ok={report.ok}, 输出目录 {config.out}")
    for check in report.checks:
        print(f"  [{'通过' if check['passed'] else '失败'}] {check['name']}")
    for label, gap in sorted(report.gaps.items()):
        print(f"  gap[{label}] = {gap:.6g}")
    return EXIT_OK if report.ok else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
