# routes/cw.py
# 连续波相关子命令：cw-spectrum（反射谱）与 fit（反射谱拟合器件参数）

from dataclasses import asdict, replace

from repositories.base import write_json
from repositories.config_repo import RunConfig
from repositories.result_repo import read_spectrum, write_fit_spectrum, write_spectrum
from services.experiments import cw_spectrum, figures_of_merit, fit_cw_spectrum
from utils import logger


def register(subparsers, parents) -> None:
    subparsers.add_parser('cw-spectrum', parents=parents,
                          help='连续波反射谱 R(激光失谐)，每个 [spectrum].powers 一条')
    subparsers.add_parser('fit', parents=parents,
                          help='用实测连续波反射谱拟合器件参数（[fit] 节）')


def run_cw_spectrum(config: RunConfig, out_dir: str, artifacts: list[str]) -> dict:
    """逐功率计算反射谱，写出 spectrum.csv 与 summary.json"""
    detunings = config.spectrum.detunings()
    results = []
    for power in config.spectrum.powers:
        logger.info(f"反射谱 P = {power:.3e} W, {len(detunings)} 个失谐点")
        results.append(cw_spectrum(config.device, power, detunings, config.numerics, config.threads))

    write_spectrum(out_dir, results)
    artifacts.append('spectrum.csv')

    summary = {
        'figures_of_merit': asdict(figures_of_merit(config.device)),
        'spectra': [{
            'power': result.power,
            'photon_flux': result.photon_flux,
            'R_min': float(result.reflectivity.min()),
            'R_max': float(result.reflectivity.max()),
            'detuning_at_R_min': float(result.detunings[result.reflectivity.argmin()]),
            'n_fock_h': result.n_fock_h,
            'n_fock_v': result.n_fock_v,
        } for result in results],
    }
    write_json(out_dir, 'summary.json', summary)
    artifacts.append('summary.json')
    return summary


def run_fit(config: RunConfig, out_dir: str, artifacts: list[str]) -> dict:
    """读取 [fit].spectrum_path，Nelder–Mead 拟合自由参数，写出 fit.json 与 fit_spectrum.csv"""
    settings = config.fit
    measured = read_spectrum(settings.spectrum_path, settings.power)
    result = fit_cw_spectrum(measured, config.device, settings.free, settings.power,
                             numerics=config.numerics, max_iter=settings.max_iter, threads=config.threads)
    record = result.to_dict()
    record['spectrum_path'] = settings.spectrum_path
    record['power'] = settings.power
    write_json(out_dir, 'fit.json', record)
    artifacts.append('fit.json')

    # 拟合与初值模型谱（与拟合过程相同的固定截断）
    numerics = replace(config.numerics, auto_truncation=False)
    detunings = [d for d, _ in measured]
    initial = cw_spectrum(config.device, settings.power, detunings, numerics, config.threads)
    fitted = cw_spectrum(result.params, settings.power, detunings, numerics, config.threads)
    write_fit_spectrum(out_dir, measured, fitted.reflectivity, initial.reflectivity)
    artifacts.append('fit_spectrum.csv')
    return record


HANDLERS = {
    'cw-spectrum': run_cw_spectrum,
    'fit': run_fit,
}
