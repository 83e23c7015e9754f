"""Experiment runners behind the command-line interface.

Every runner returns ``{relative path: text}``; the caller writes the files.
Independent (seed, grid point) tasks may run in worker processes; results
are always gathered in task order so outputs do not depend on the worker
count.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import crossbar as xb
from .config import ExperimentConfig
from .defects import compensate_average_error
from .device_models import RetentionProjector, default_init, fit_model, project_retention
from .imperfections import Faults, ImperfectionStack, Noise
from .io import csv_text, ingest_measurements, json_text
from .network import (Dataset, accuracy, build_mini_convnet, evaluate_accuracy_drop, make_blob_dataset,
                      network_from_json, network_to_json, train)
from .noise import energy_report, optimize_dynamic_range, snr_optimize
from .thermal import (calibrate_bn_bank, default_state_opt_config, default_temperature_model, state_opt_search,
                      temperature_drops, train_with_temp_sweep)

WORKERS_ENV = "MIXEDSIM_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_map(fn, tasks, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def _dataset(cfg) -> Dataset:
    return make_blob_dataset(cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed)


def train_network(netcfg, data: Dataset, seed: int, perturb_hw=None):
    net = build_mini_convnet(seed, tuple(netcfg.channels), netcfg.hidden)
    kw = dict(epochs=netcfg.epochs, batch_size=netcfg.batch_size, optimizer=netcfg.optimizer, lr=netcfg.lr,
              momentum=netcfg.momentum, weight_decay=netcfg.weight_decay, seed=seed)
    if perturb_hw is None:
        history = train(net, data.X_train, data.y_train, **kw)
    else:
        history = train_with_temp_sweep(net, data.X_train, data.y_train, hardware=perturb_hw, **kw)
    net.calibrate_ranges(data.X_train)
    return net, history


# -- retention / fit ---------------------------------------------------------------


def run_retention(cfg: ExperimentConfig) -> dict:
    c = cfg.retention
    hours = project_retention(c.t_elapsed, c.t_bake, c.t_target, RetentionProjector(c.ea))
    rows = [(c.t_elapsed, c.t_bake, c.t_target, c.ea, hours, hours / (24 * 365.25))]
    return {"retention.csv": csv_text(("t_elapsed_h", "t_bake_c", "t_target_c", "ea_ev", "hours", "years"), rows)}


def run_fit(cfg: ExperimentConfig, base_dir=".") -> dict:
    c = cfg.fit
    path = c.measurements if os.path.isabs(c.measurements) else os.path.join(base_dir, c.measurements)
    table = ingest_measurements(path, require_temperature=c.shape.startswith("temp"))
    init = c.init if c.init is not None else default_init(c.shape)
    res = fit_model(table, c.shape, init, x_tune=c.x_tune, t0=c.t0, max_iter=c.max_iter)
    rec = res.to_record(c.fitted_at)
    rec["metadata"]["iterations"] = res.iterations
    rec["metadata"]["rows"] = len(table)
    return {"model.json": json_text(rec)}


# -- tuning ---------------------------------------------------------------------------


def _tune_task(args):
    c, seed, approach = args
    state = xb.init_crossbar(c["rows"], c["cols"], c["sigma_alpha"], seed)
    targets = xb.pseudo_image(c["rows"], c["cols"], seed)
    kw = dict(approach=approach, rounds=c["rounds"], v_step=c["v_step"], target_rel_error=c["target_rel_error"])
    if c.get("cap_schedule_set") is not None:
        kw["cap_schedule_set"] = tuple(c["cap_schedule_set"])
    if c.get("cap_schedule_reset") is not None:
        kw["cap_schedule_reset"] = tuple(c["cap_schedule_reset"])
    rep = xb.tune_crossbar(state, targets, xb.TuningConfig(**kw))
    summary = rep.summary(c["threshold"])
    devices = csv_text(("row", "col", "target", "final", "rel_error"), rep.device_rows())
    return summary, devices


def run_tune(cfg: ExperimentConfig) -> dict:
    c = cfg.tune.model_dump()
    tasks = [(c, s, a) for a in c["approaches"] for s in cfg.seeds]
    results = parallel_map(_tune_task, tasks)
    out, rows = {}, []
    for (_, seed, approach), (summary, devices) in zip(tasks, results):
        stem = f"{approach}_seed{seed}"
        out[f"report_{stem}.json"] = json_text(summary)
        out[f"devices_{stem}.csv"] = devices
        es = summary["error_stats"]
        rows.append((approach, seed, es["tail_fraction"], es["mean"], summary["pulses_total"],
                     summary["disturbance_events"], summary["anchored_devices"]))
    out["summary.csv"] = csv_text(("approach", "seed", "tail_fraction", "mean_abs_error", "pulses",
                                   "disturbance_events", "anchored_devices"), rows)
    return out


# -- faults ------------------------------------------------------------------------------


def fault_drop(net, data: Dataset, hardware, ppm, mix, seed, approach, calibration_samples=256):
    stack = ImperfectionStack([Faults(ppm, tuple(mix), seed, approach)], hardware.technology, hardware.scheme)
    if approach == "retune+column":
        stack = stack.with_compensation(compensate_average_error(net, stack, data.X_val[:calibration_samples]))
    drop = evaluate_accuracy_drop(net, stack, data.X_test, data.y_test)["mean"]
    return drop, stack.uncompensatable_count(net)


def _fault_task(args):
    net_json, c, ppm, seed, approach = args
    from .config import FaultsConfig

    c = FaultsConfig.model_validate(c)
    return fault_drop(network_from_json(net_json), _dataset(c.dataset), c.hardware, ppm, c.mix, seed, approach,
                      c.calibration_samples)


def run_faults(cfg: ExperimentConfig) -> dict:
    c = cfg.faults
    data = _dataset(c.dataset)
    net, _ = train_network(c.network, data, c.train_seed)
    net_json = network_to_json(net)
    raw = c.model_dump(mode="json")
    tasks = [(net_json, raw, p, s, a) for p in c.ppm for a in c.approaches for s in cfg.seeds]
    results = parallel_map(_fault_task, tasks)
    rows = [(p, s, a, drop, unc) for (_, _, p, s, a), (drop, unc) in zip(tasks, results)]
    summary = {}
    for p, s, a, drop, _ in rows:
        summary.setdefault(f"{p}", {}).setdefault(a, []).append(drop)
    summary = {p: {a: float(np.mean(v)) for a, v in d.items()} for p, d in summary.items()}
    return {"faults.csv": csv_text(("ppm", "seed", "approach", "accuracy_drop", "uncompensatable_pairs"), rows),
            "summary.json": json_text({"clean_accuracy": accuracy(net, data.X_test, data.y_test),
                                       "mean_drop": summary})}


# -- noise --------------------------------------------------------------------------------


def _noise_task(args):
    net_json, c, seed = args
    from .config import NoiseConfig

    c = NoiseConfig.model_validate(c)
    net = network_from_json(net_json)
    data = _dataset(c.dataset)
    tech, scheme = c.hardware.technology, c.hardware.scheme
    X, y = data.X_test[:c.eval_samples], data.y_test[:c.eval_samples]
    n_layers = len(net.synaptic)
    if c.mode == "sweep":
        return [(r, seed, evaluate_accuracy_drop(net, ImperfectionStack([Noise(seed, r)], tech, scheme), X, y)["mean"])
                for r in c.rho]
    if c.mode == "layer":
        rows = []
        for l in range(n_layers):
            for r in c.rho:
                rho = tuple(r if j == l else float("inf") for j in range(n_layers))
                st = ImperfectionStack([Noise(seed, rho)], tech, scheme)
                rows.append((l, r, seed, evaluate_accuracy_drop(net, st, X, y)["mean"]))
        return rows
    Xv, yv = data.X_val[:c.eval_samples], data.y_val[:c.eval_samples]
    clean = 100.0 * accuracy(net, Xv, yv)

    def eval_rho(rho):
        st = ImperfectionStack([Noise(seed, tuple(float(r) for r in rho))], tech, scheme)
        return clean - 100.0 * accuracy(net, Xv, yv, st.realize(net))

    m = net.op_counts()
    start = np.full(n_layers, c.rho[0])
    state = snr_optimize(eval_rho, m, start, c.a, c.max_iters)
    result = {"rho": state.rho.tolist(), "metric": state.metric, "trace": state.trace,
              "energy": energy_report(state.rho, m)}
    if c.clip:
        def eval_net(n):
            st = ImperfectionStack([Noise(seed, tuple(state.rho.tolist()))], tech, scheme)
            return clean - 100.0 * accuracy(n, Xv, yv, st.realize(n))

        result["dynamic_range"] = optimize_dynamic_range(net, eval_net, data.X_train[:512])
    final = ImperfectionStack([Noise(seed, tuple(state.rho.tolist()))], tech, scheme)
    result["test_drop"] = evaluate_accuracy_drop(net, final, X, y)["mean"]
    return result


def run_noise(cfg: ExperimentConfig) -> dict:
    c = cfg.noise
    data = _dataset(c.dataset)
    net, _ = train_network(c.network, data, c.train_seed)
    net_json = network_to_json(net)
    tasks = [(net_json, c.model_dump(mode="json"), s) for s in cfg.seeds]
    results = parallel_map(_noise_task, tasks)
    if c.mode == "sweep":
        rows = [r for res in results for r in res]
        return {"sweep.csv": csv_text(("rho", "seed", "accuracy_drop"), rows)}
    if c.mode == "layer":
        rows = [r for res in results for r in res]
        return {"layer_sweep.csv": csv_text(("layer", "rho", "seed", "accuracy_drop"), rows)}
    return {"optimize.json": json_text({str(s): r for s, r in zip(cfg.seeds, results)})}


# -- thermal ---------------------------------------------------------------------------------


def thermal_benchmark(seed: int, technology, scheme, approaches, k_values, temps, data: Dataset, netcfg) -> dict:
    """Accuracy drop over temperature for each mitigation combination.

    Keys are approach labels (``1+2`` is expanded to ``1+2/k{k}`` for every
    ``k`` in ``k_values``); values map temperature to drop.
    """
    hw = ImperfectionStack(technology=technology, scheme=scheme)
    out, banks = {}, {}
    need_a1 = any(a in ("1", "1+2") for a in approaches)
    if "baseline" in approaches:
        net, _ = train_network(netcfg, data, seed)
        out["baseline"] = temperature_drops(net, data.X_test, data.y_test, temps, hw)
    if need_a1:
        a1, _ = train_network(netcfg, data, seed, perturb_hw=hw)
        if "1" in approaches:
            out["1"] = temperature_drops(a1, data.X_test, data.y_test, temps, hw)
        if "1+2" in approaches:
            for k in k_values:
                bank = calibrate_bn_bank(a1, data.X_train, data.y_train, k=k, hardware=hw, seed=seed)
                out[f"1+2/k{k}"] = temperature_drops(a1, data.X_test, data.y_test, temps, hw, bank)
                banks[f"1+2/k{k}"] = bank.to_record()
    if "1+2+3" in approaches:
        opt = state_opt_search(default_state_opt_config(technology), default_temperature_model(technology),
                               technology, scheme)
        hw3 = ImperfectionStack(technology=technology, scheme=scheme, mappings={"default": opt.rule_mapping()})
        a3, _ = train_network(netcfg, data, seed, perturb_hw=hw3)
        k = max(k_values)
        bank = calibrate_bn_bank(a3, data.X_train, data.y_train, k=k, hardware=hw3, seed=seed)
        out["1+2+3"] = temperature_drops(a3, data.X_test, data.y_test, temps, hw3, bank)
        banks["1+2+3"] = {**bank.to_record(), "mapping": opt.rule_mapping().to_record()}
    return {"drops": out, "banks": banks}


def _thermal_task(args):
    c, seed = args
    from .config import ThermalConfig

    c = ThermalConfig.model_validate(c)
    return thermal_benchmark(seed, c.hardware.technology, c.hardware.scheme, c.approaches, [c.k], c.temperatures,
                             _dataset(c.dataset), c.network)


def run_thermal(cfg: ExperimentConfig) -> dict:
    c = cfg.thermal
    tasks = [(c.model_dump(mode="json"), s) for s in cfg.seeds]
    results = parallel_map(_thermal_task, tasks)
    rows = []
    out = {}
    for (_, seed), res in zip(tasks, results):
        for label, drops in res["drops"].items():
            for t, d in drops.items():
                rows.append((label.replace(f"/k{c.k}", ""), seed, t, d))
        out[f"bank_seed{seed}.json"] = json_text(res["banks"])
    out["thermal.csv"] = csv_text(("approach", "seed", "temperature", "accuracy_drop"), rows)
    return out


# -- train ------------------------------------------------------------------------------------


def _train_task(args):
    c, seed = args
    from .config import TrainConfig

    c = TrainConfig.model_validate(c)
    data = _dataset(c.dataset)
    net, history = train_network(c.network, data, seed)
    return network_to_json(net), history, accuracy(net, data.X_test, data.y_test)


def run_train(cfg: ExperimentConfig) -> dict:
    c = cfg.train
    tasks = [(c.model_dump(mode="json"), s) for s in cfg.seeds]
    out, rows = {}, []
    for (_, seed), (net_json, history, acc) in zip(tasks, parallel_map(_train_task, tasks)):
        out[f"network_seed{seed}.json"] = net_json + "\n"
        rows += [(seed, h["epoch"], h["loss"], h["train_acc"]) for h in history]
        out[f"test_accuracy_seed{seed}.json"] = json_text({"seed": seed, "test_accuracy": acc})
    out["history.csv"] = csv_text(("seed", "epoch", "loss", "train_acc"), rows)
    return out


RUNNERS = {"retention": run_retention, "tune": run_tune, "faults": run_faults, "noise": run_noise,
           "thermal": run_thermal, "train": run_train}


def run(cfg: ExperimentConfig, base_dir=".") -> dict:
    if cfg.kind == "fit":
        return run_fit(cfg, base_dir)
    return RUNNERS[cfg.kind](cfg)
