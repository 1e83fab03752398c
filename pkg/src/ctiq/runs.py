"""Command implementations shared by the service endpoints and the CLI.

Each function takes a request model, validates inputs, computes, writes
artifacts plus a run manifest under the request's output directory, and
returns a response model. All artifact files are byte-deterministic
given identical requests; only the manifest carries wall-clock.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import schemas as S
from .attack import AttackConfig, evaluate_under_attack
from .errors import ConfigError
from .evaluation import (PRESETS, compare_methods, srocc, sweep_eps_sigma, tau_closeness)
from .image_opt import OptConfig, optimize_image
from .io_utils import RunManifest, ensure_out_dir, write_aligned_table, write_csv, write_json
from .models import DenoiserModel, QualityModel
from .smoothing import (SmoothingConfig, certified_score, is_feasible, max_ratio, min_samples)
from .training import LossWeights, TrainConfig, train_denoiser, train_metric

CORRUPTION_STREAM = 0xC0FFEE  # substream tag for the optimize command's input noising


def _require_file(path, field):
    if path is None:
        raise ConfigError(f"field '{field}' is required")
    if not Path(path).is_file():
        raise ConfigError(f"field '{field}': no such file {path}")
    return path


def _load_datasets(paths, field="datasets"):
    if not paths:
        raise ConfigError(f"field '{field}' must name at least one dataset")
    return [data_mod.load_dataset(_require_file(p, field)) for p in paths]


def _split_items(dataset, split, limit):
    items = dataset.split(split)
    if limit is not None:
        if limit < 1:
            raise ConfigError(f"field 'limit' must be >= 1, got {limit}")
        items = items[:limit]
    if not items:
        raise ConfigError(f"split '{split}' is empty")
    return items


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _history_csv(path, history, columns):
    write_csv(path, history, columns)


def gen_data(req: S.GenDataRequest) -> S.GenDataResponse:
    out = ensure_out_dir(req.out)
    manifest = RunManifest("gen-data", req.model_dump(), out)
    ds = data_mod.generate(req.count, req.height, req.width, req.seed,
                           mos_noise=req.mos_noise, workers=req.workers)
    path = out / req.name
    data_mod.save_dataset(ds, path)
    sha = manifest.add(path)
    return S.GenDataResponse(
        dataset=str(path), count=len(ds), sha256=manifest.artifacts[path.name],
        manifest=manifest.write(),
    )


def run_train_metric(req: S.TrainMetricRequest) -> S.TrainMetricResponse:
    out = ensure_out_dir(req.out)
    manifest = RunManifest("train-metric", req.model_dump(), out)
    datasets = _load_datasets(req.datasets)
    metric = QualityModel(seed=req.seed)
    history = train_metric(metric, datasets, epochs=req.epochs, lr=req.lr,
                           batch_size=req.batch_size, seed=req.seed)
    model_path = out / req.name
    metric.save(model_path)
    manifest.add(model_path)
    hist_path = out / (req.name + ".history.csv")
    _history_csv(hist_path, history, ["epoch", "mse", "val_srocc"])
    manifest.add(hist_path)
    best = max((h["val_srocc"] for h in history), default=float("nan"))
    return S.TrainMetricResponse(
        model=str(model_path), history_csv=str(hist_path),
        best_val_srocc=best, epochs=req.epochs, manifest=manifest.write(),
    )


def run_train_denoiser(req: S.TrainDenoiserRequest) -> S.TrainDenoiserResponse:
    out = ensure_out_dir(req.out)
    manifest = RunManifest("train-denoiser", req.model_dump(), out)
    datasets = _load_datasets(req.datasets)
    epochs = req.epochs if req.epochs is not None else (50 if req.mode == "composite" else 30)
    lr = req.lr if req.lr is not None else (1e-4 if req.mode == "composite" else 1e-3)
    cfg = TrainConfig(sigma=req.sigma, epochs=epochs, lr=lr, seed=req.seed,
                      batch_size=req.batch_size, mode=req.mode)
    metric = None
    if req.mode == "composite":
        metric = QualityModel.load(_require_file(req.metric, "metric"))
    if req.init_from is not None:
        denoiser = DenoiserModel.load(_require_file(req.init_from, "init_from"))
    else:
        denoiser = DenoiserModel(seed=req.seed)
    history = train_denoiser(denoiser, metric, datasets, cfg,
                             LossWeights(c_r=req.c_r, c_t=req.c_t))
    model_path = out / req.name
    denoiser.save(model_path)
    manifest.add(model_path)
    hist_path = out / (req.name + ".history.csv")
    _history_csv(hist_path, history, ["epoch", "mse", "rank", "targ", "total", "val_srocc"])
    manifest.add(hist_path)
    sroccs = [h["val_srocc"] for h in history if not math.isnan(h["val_srocc"])]
    return S.TrainDenoiserResponse(
        model=str(model_path), history_csv=str(hist_path), mode=req.mode, epochs=epochs,
        best_val_srocc=max(sroccs) if sroccs else None, manifest=manifest.write(),
    )


def _smoothing_config(preset, sigma, epsilon, n, seed) -> SmoothingConfig:
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"field 'preset': unknown preset '{preset}'")
        sigma, epsilon = PRESETS[preset]
    return SmoothingConfig(sigma=sigma, epsilon=epsilon, n_samples=n, seed=seed)


def run_certify(req: S.CertifyRequest) -> S.CertifyResponse:
    out = ensure_out_dir(req.out)
    manifest = RunManifest("certify", req.model_dump(), out)
    dataset = data_mod.load_dataset(_require_file(req.dataset, "dataset"))
    metric = QualityModel.load(_require_file(req.metric, "metric"))
    denoiser = DenoiserModel.load(_require_file(req.denoiser, "denoiser")) if req.denoiser else None
    cfg = _smoothing_config(req.preset, req.sigma, req.epsilon, req.n, req.seed)
    items = _split_items(dataset, req.split, req.limit)
    records = []
    for i, item in enumerate(items):
        cert = certified_score(metric, item.image, cfg, denoiser,
                               chunk_size=req.chunk_size, workers=req.workers)
        records.append({
            "image_id": i, "sigma": cfg.sigma, "epsilon": cfg.epsilon, "n": cfg.n_samples,
            "median": cert.median, "lower": cert.lower, "upper": cert.upper,
            "cd_pct": cert.cd_pct, "seed": cfg.seed,
        })
    rec_path = out / req.name
    write_json(rec_path, records)
    manifest.add(rec_path)
    return S.CertifyResponse(
        records=[S.CertRecord(**r) for r in records],
        mean_cd_pct=float(np.mean([r["cd_pct"] for r in records])),
        records_json=str(rec_path), manifest=manifest.write(),
    )


def run_attack(req: S.AttackRequest) -> S.AttackResponse:
    out = ensure_out_dir(req.out)
    manifest = RunManifest("attack", req.model_dump(), out)
    dataset = data_mod.load_dataset(_require_file(req.dataset, "dataset"))
    metric = QualityModel.load(_require_file(req.metric, "metric"))
    eps, sigma = req.eps, req.sigma
    if req.preset is not None:
        if req.preset not in PRESETS:
            raise ConfigError(f"field 'preset': unknown preset '{req.preset}'")
        sigma, eps = PRESETS[req.preset]
    cert_eps = req.cert_epsilon if req.cert_epsilon is not None else eps
    denoisers = {}
    if "dms" in req.defenses:
        denoisers["dms"] = DenoiserModel.load(_require_file(req.dms, "dms"))
    if "dms_iqa" in req.defenses:
        denoisers["dms_iqa"] = DenoiserModel.load(_require_file(req.dms_iqa, "dms_iqa"))
    items = _split_items(dataset, req.split, req.limit)
    attack_cfg = AttackConfig(epsilon=eps, steps=req.steps, lr=req.attack_lr, seed=req.seed)
    smoothing_cfg = SmoothingConfig(sigma=sigma, epsilon=cert_eps, n_samples=req.n, seed=req.seed)
    records, aggregates = evaluate_under_attack(
        metric, denoisers, items, attack_cfg, smoothing_cfg,
        defenses=tuple(req.defenses), chunk_size=req.chunk_size, workers=req.workers,
    )
    rec_path = out / req.name
    write_json(rec_path, records)
    manifest.add(rec_path)
    agg_path = out / (req.name + ".aggregates.json")
    write_json(agg_path, aggregates)
    manifest.add(agg_path)
    return S.AttackResponse(
        aggregates=[
            S.AttackAggregate(**{**a, "mean_cd_l": _finite(a["mean_cd_l"]),
                                 "mean_cd_u": _finite(a["mean_cd_u"])})
            for a in aggregates
        ],
        records_json=str(rec_path), manifest=manifest.write(),
    )


def run_eval_compare(req: S.EvalCompareRequest) -> S.EvalCompareResponse:
    out = ensure_out_dir(req.out)
    manifest = RunManifest("eval-compare", req.model_dump(), out)
    dataset = data_mod.load_dataset(_require_file(req.dataset, "dataset"))
    metric = QualityModel.load(_require_file(req.metric, "metric"))
    denoisers = {
        "dms": DenoiserModel.load(_require_file(req.dms, "dms")),
        "dms_iqa": DenoiserModel.load(_require_file(req.dms_iqa, "dms_iqa")),
    }
    items = _split_items(dataset, req.split, req.limit)
    rows, records = compare_methods(metric, denoisers, items, req.presets, req.n, req.seed,
                                    chunk_size=req.chunk_size, workers=req.workers)
    columns = ["method", "preset", "sigma", "epsilon", "srocc", "plcc",
               "tau_srocc", "tau_plcc", "mean_cd_pct"]
    csv_path = out / "comparison.csv"
    write_csv(csv_path, rows, columns)
    manifest.add(csv_path)
    txt_path = out / "comparison.txt"
    write_aligned_table(txt_path, rows, columns)
    manifest.add(txt_path)
    rec_path = out / "comparison_records.json"
    write_json(rec_path, records)
    manifest.add(rec_path)
    return S.EvalCompareResponse(
        rows=[S.CompareRow(**{**r, "mean_cd_pct": _finite(r["mean_cd_pct"])}) for r in rows],
        table_csv=str(csv_path), table_txt=str(txt_path), records_json=str(rec_path),
        manifest=manifest.write(),
    )


def run_optimize(req: S.OptimizeRequest) -> S.OptimizeResponse:
    out = ensure_out_dir(req.out)
    manifest = RunManifest("optimize", req.model_dump(), out)
    dataset = data_mod.load_dataset(_require_file(req.dataset, "dataset"))
    metric = QualityModel.load(_require_file(req.metric, "metric"))
    denoiser = DenoiserModel.load(_require_file(req.denoiser, "denoiser")) if req.denoiser else None
    items = _split_items(dataset, req.split, req.limit)
    clean = np.stack([it.image for it in items])
    noisy = np.empty_like(clean)
    for i in range(len(items)):
        rng = np.random.default_rng((req.seed, CORRUPTION_STREAM, i))
        noisy[i] = clean[i] + req.noise_sigma * rng.standard_normal(clean[i].shape)

    summaries = []
    for backend in req.backends:
        traj_rows = []
        finals = []
        start_rmses = []
        final_rmses = []
        for i in range(len(items)):
            cfg = OptConfig(
                sigma=req.sigma, steps=req.steps, lr=req.lr, n_samples=req.n,
                backend=backend, seed=(req.seed << 20) + i,
                quality_weight=req.quality_weight, log_every=req.log_every,
                chunk_size=req.chunk_size,
            )
            final, traj = optimize_image(noisy[i], clean[i], metric, denoiser, cfg)
            finals.append(final)
            start_rmses.append(traj[0]["rmse_vs_clean"])
            final_rmses.append(traj[-1]["rmse_vs_clean"])
            for row in traj:
                traj_rows.append({"image_id": i, **row})
        csv_path = out / f"optimize_{backend}.csv"
        write_csv(csv_path, traj_rows, ["image_id", "step", "loss", "q_value", "rmse_vs_clean"])
        manifest.add(csv_path)
        ctds_path = out / f"optimize_{backend}.ctds"
        out_items = [
            data_mod.LabeledImage(image=img, mos=0.0, kind=data_mod.KIND_NONE,
                                  severity=0.0, seed=i)
            for i, img in enumerate(finals)
        ]
        data_mod.save_dataset(data_mod.Dataset(items=out_items), ctds_path)
        manifest.add(ctds_path)
        summaries.append(S.OptimizeBackendSummary(
            backend=backend,
            mean_final_rmse=float(np.mean(final_rmses)),
            mean_start_rmse=float(np.mean(start_rmses)),
            images=len(items),
            trajectory_csv=str(csv_path),
            images_ctds=str(ctds_path),
        ))
    return S.OptimizeResponse(summaries=summaries, manifest=manifest.write())


def _defended_taus(metric, denoiser, items, cfg, chunk_size, workers):
    images = np.stack([it.image for it in items])
    mos = np.array([it.mos for it in items])
    undefended = metric.score_batch(images)
    defended = np.empty(len(items))
    cds = np.empty(len(items))
    for i in range(len(items)):
        cert = certified_score(metric, images[i], cfg, denoiser,
                               chunk_size=chunk_size, workers=workers)
        defended[i] = cert.median
        cds[i] = cert.cd_pct
    t_s, t_p = tau_closeness(undefended, defended, mos)
    return t_s, t_p, float(np.mean(cds))


def run_sweep(req: S.SweepRequest) -> S.SweepResponse:
    out = ensure_out_dir(req.out)
    manifest = RunManifest("sweep", req.model_dump(), out)
    dataset = data_mod.load_dataset(_require_file(req.dataset, "dataset"))
    metric = QualityModel.load(_require_file(req.metric, "metric"))
    test_items = _split_items(dataset, "test", req.limit)

    rows = []
    if req.grid in ("loss", "batch"):
        _require_file(req.init_from, "init_from")
        eval_cfg = SmoothingConfig(sigma=req.sigma, epsilon=min(req.sigma * 2, 0.36),
                                   n_samples=req.n, seed=req.seed)
        if req.grid == "loss":
            cells = [(c_r, c_t, req.batch_size) for c_r in req.c_r_values for c_t in req.c_t_values]
        else:
            cells = [(req.c_r, req.c_t, b) for b in req.batch_values]
        for c_r, c_t, batch in cells:
            denoiser = DenoiserModel.load(req.init_from)
            cfg = TrainConfig(sigma=req.sigma, epochs=req.epochs, lr=req.lr, seed=req.seed,
                              batch_size=batch, mode="composite")
            train_denoiser(denoiser, metric, [dataset], cfg, LossWeights(c_r=c_r, c_t=c_t))
            t_s, t_p, cd = _defended_taus(metric, denoiser, test_items, eval_cfg,
                                          req.chunk_size, req.workers)
            if req.grid == "loss":
                rows.append({"c_r": c_r, "c_t": c_t, "tau_srocc": t_s, "tau_plcc": t_p,
                             "mean_cd_pct": cd})
            else:
                rows.append({"batch": batch, "tau_srocc": t_s, "tau_plcc": t_p,
                             "mean_cd_pct": cd})
        columns = (["c_r", "c_t"] if req.grid == "loss" else ["batch"]) + \
            ["tau_srocc", "tau_plcc", "mean_cd_pct"]
    elif req.grid == "eps-sigma":
        denoiser = DenoiserModel.load(_require_file(req.denoiser, "denoiser")) \
            if req.denoiser else None
        rows = sweep_eps_sigma(metric, denoiser, test_items, req.sigmas, req.epsilons,
                               req.n, req.seed, chunk_size=req.chunk_size, workers=req.workers)
        columns = ["sigma", "epsilon", "tau_srocc", "tau_plcc", "mean_cd_pct"]
    else:
        raise ConfigError(f"field 'grid': expected loss/batch/eps-sigma, got '{req.grid}'")

    csv_path = out / req.name
    write_csv(csv_path, rows, columns)
    manifest.add(csv_path)
    return S.SweepResponse(rows=rows, sweep_csv=str(csv_path), manifest=manifest.write())


def feasibility(sigma: float, epsilon: float, n: int) -> S.FeasibilityResponse:
    if sigma <= 0:
        raise ConfigError(f"field 'sigma' must be positive, got {sigma}")
    if epsilon < 0:
        raise ConfigError(f"field 'epsilon' must be non-negative, got {epsilon}")
    if n < 2:
        raise ConfigError(f"field 'n' must be >= 2, got {n}")
    return S.FeasibilityResponse(
        sigma=sigma, epsilon=epsilon, n=n,
        feasible=is_feasible(sigma, epsilon, n),
        max_ratio=max_ratio(n),
        min_samples=min_samples(epsilon / sigma),
    )
