# app.py
# 主入口 - qfilter 量子点微柱单光子滤波器模拟（命令行批处理，三分层：routes / services / repositories）
#
# 用法：
#   python app.py pulsed-sweep --config qfilter_config.toml --out output/sweep
#   python app.py g3-map --seed 7 --threads 4
# 子命令缺省时使用配置文件中的 experiment。
# 退出码：0 成功；2 模块错误（QFilterError，含配置错误与部分失败的扫描）；1 其他异常

import sys
import time
import logging
import argparse

from repositories.base import ensure_output_dir, write_manifest
from repositories.config_repo import EXPERIMENTS, RunConfig, load_config
from routes import HANDLERS, ROUTES
from utils import logger, resolve_threads, ConfigError, QFilterError

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_MODULE_ERROR = 2
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


# ============ 统一的日志配置（只保留这一段！） ============
def configure_logging(level: str = 'WARNING') -> None:
    logger.setLevel(getattr(logging, level))
    if not logger.handlers:
        # 控制台处理器，输出到标准错误
        handler = logging.StreamHandler()
        handler.setLevel(logging.DEBUG)
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        handler.setFormatter(formatter)
        logger.addHandler(handler)
# ====================================================


def _float_list(text: str) -> list[float]:
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--n-in 必须为逗号分隔的数值列表，当前为 {text!r}")


def _detuning_range(text: str) -> list[float]:
    parts = text.split(':')
    try:
        values = [float(part) for part in parts]
    except ValueError:
        values = []
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"--detuning-range 格式为 LO:HI:STEP，当前为 {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    # 公共参数同时挂在主解析器与各子命令上；SUPPRESS 保证未给出的参数不覆盖配置文件
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--config', help='TOML/JSON 配置文件')
    common.add_argument('--out', help='输出目录（覆盖 output.dir）')
    common.add_argument('--seed', type=int, help='随机种子')
    common.add_argument('--threads', type=int, help='并发线程数（缺省读 QFILTER_THREADS，再缺省为机器核数）')
    common.add_argument('--n-in', type=_float_list, dest='n_in', help='扫描的 n_in 列表，如 0.1,0.3,1')
    common.add_argument('--tau', type=float, help='脉冲 FWHM（ps）')
    common.add_argument('--detuning-range', type=_detuning_range, dest='detuning_range',
                        help='反射谱失谐范围 LO:HI:STEP（µeV），负数起点写成 --detuning-range=-200:200:2')
    common.add_argument('--log-level', choices=LOG_LEVELS, dest='log_level', help='日志级别（默认 WARNING）')
    common.add_argument('--xlsx', action='store_true', help='同时导出 sweep.xlsx')

    parser = argparse.ArgumentParser(prog='qfilter', parents=[common],
                                     description='量子点微柱单光子滤波器模拟')
    subparsers = parser.add_subparsers(dest='experiment', metavar='EXPERIMENT')
    for route in ROUTES:
        route.register(subparsers, [common])
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    """命令行参数 → 嵌套覆盖字典（只含实际给出的参数）"""
    given = vars(args)
    overrides: dict = {}

    def put(section: str | None, key: str, value) -> None:
        target = overrides if section is None else overrides.setdefault(section, {})
        target[key] = value

    if given.get('experiment'):
        put(None, 'experiment', given['experiment'])
    if 'seed' in given:
        put(None, 'seed', given['seed'])
    if 'threads' in given:
        put(None, 'threads', given['threads'])
    if 'out' in given:
        put('output', 'dir', given['out'])
    if 'xlsx' in given:
        put('output', 'xlsx', True)
    if 'n_in' in given:
        put('sweep', 'n_in', given['n_in'])
    if 'tau' in given:
        put('drive', 'tau', given['tau'])
    if 'detuning_range' in given:
        put('spectrum', 'detuning_range', given['detuning_range'])
    return overrides


# ====================== 运行 ======================
def run(config: RunConfig) -> int:
    """
    执行一次实验：调用子命令处理函数，写出产物与 manifest.json

    Returns:
        int: 退出码（0 成功；2 模块错误；1 其他异常）
    """
    started = time.perf_counter()
    try:
        out_dir = ensure_output_dir(config.output.dir)
    except ConfigError as e:
        print(f"qfilter: {e}", file=sys.stderr)
        return EXIT_MODULE_ERROR

    logger.info(f"开始 {config.experiment}，输出目录 {out_dir}")
    artifacts: list[str] = []
    status, error = EXIT_OK, None
    try:
        summary = HANDLERS[config.experiment](config, out_dir, artifacts)
        if summary and summary.get('partial'):
            status, error = EXIT_MODULE_ERROR, '部分扫描点失败，详见 summary.json 中的 failed_points'
    except QFilterError as e:
        logger.error(f"{config.experiment} 失败: {e}", exc_info=True)
        status, error = EXIT_MODULE_ERROR, f"{type(e).__name__}: {e}"
    except Exception as e:
        logger.error(f"{config.experiment} 发生未预期错误: {e}", exc_info=True)
        status, error = EXIT_UNEXPECTED, f"{type(e).__name__}: {e}"

    write_manifest(out_dir, experiment=config.experiment, config=config.to_dict(), seed=config.seed,
                   artifacts=artifacts, wall_time=time.perf_counter() - started,
                   partial=status != EXIT_OK, error=error, threads=resolve_threads(config.threads))
    if error:
        print(f"qfilter {config.experiment}: {error}", file=sys.stderr)
    else:
        logger.info(f"{config.experiment} 完成: {', '.join(sorted(artifacts))}")
    return status


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(getattr(args, 'log_level', 'WARNING'))
    try:
        config = load_config(getattr(args, 'config', None), overrides_from_args(args))
    except ConfigError as e:
        print(f"qfilter: 配置错误: {e}", file=sys.stderr)
        return EXIT_MODULE_ERROR
    if config.experiment not in HANDLERS:
        print(f"qfilter: 未知实验 {config.experiment}（可选 {', '.join(EXPERIMENTS)}）", file=sys.stderr)
        return EXIT_MODULE_ERROR
    return run(config)


# ====================== 启动 ======================
if __name__ == '__main__':
    sys.exit(main())
