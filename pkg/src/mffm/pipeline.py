"""File-backed experiment stages: data generation, training, evaluation, ablations, reports.

Every stage reads and writes MFFM containers (see :mod:`mffm.container`) or
CSV files under the configured output directory. Each file's metadata holds
the config echo, the build identifier and the dataset hash so that
:func:`write_report` can refuse to mix results from different datasets.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import subprocess
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cascade import CascadeModel, nfe_scan, predict_deterministic, sample_stochastic_ensemble
from .config import VARIANT_SOURCE, MATRIX_VARIANTS, ExperimentConfig
from .container import load_container, save_container
from .diagnostics import UqReport, uq_metrics
from .pde import GrfSpec, generate_burgers_dataset, generate_darcy_dataset, level_stack
from .source import ResidualStats, SourceSpec, compute_residual_stats
from .tensor_core import GridHierarchy, mean_nrmse, prolong_chain
from .training import e2e_finetune, level_pairs, pretrain_level, stochastic_e2e_finetune
from .velocity_net import NetConfig, build_net, load_state_arrays, n_params, state_arrays

log = logging.getLogger(__name__)

DATA_FILE = "data.mffm"
STATS_FILE = "stats.mffm"
PRETRAINED_FILE = "pretrained.mffm"
E2E_FILE = "e2e.mffm"
STOCHASTIC_FILE = "stochastic.mffm"
PREDICTIONS_FILE = "predictions.mffm"
METRICS_FILE = "metrics.csv"
NFE_FILE = "nfe_scan.csv"
UQ_FILE = "uq.csv"
REPORT_FILE = "report.csv"
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


class PipelineError(RuntimeError):
    """A stage cannot run (missing inputs, mismatched datasets, ...)."""


def build_id() -> str:
    """``git describe``-style identifier of the code that produced an artifact."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"mffm-{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"mffm-{__version__}"


def _metadata(cfg: ExperimentConfig, dataset_hash: str, **extra) -> str:
    meta = {"config": cfg.to_text(), "build": build_id(), "dataset_hash": dataset_hash, **extra}
    return json.dumps(meta, sort_keys=True, indent=1)


def read_metadata(text: str) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise PipelineError(f"unreadable container metadata: {exc}") from exc


def out_dir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ------------------------------------------------------------------ dataset


@dataclass
class Dataset:
    levels: list[np.ndarray]  # (N, C, n, n) per resolution
    split: np.ndarray  # uint8 codes per sample
    hash: str
    scale: float = 1.0  # stored fields are divided by this to give unit RMS


    def part(self, name: str) -> list[np.ndarray]:
        mask = self.split == SPLIT_CODES[name]
        return [x[mask] for x in self.levels]


def dataset_hash(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def generate_dataset(cfg: ExperimentConfig) -> dict:
    hier = cfg.hierarchy
    d = cfg.data
    if cfg.benchmark == "darcy":
        grf = GrfSpec(hier.finest, d.length_scale, d.variance)
        samples, split = generate_darcy_dataset(cfg.n_samples, hier, grf, cfg.seed, d.forcing)
    else:
        grf = GrfSpec(hier.finest, d.length_scale, d.variance)
        samples, split = generate_burgers_dataset(cfg.n_samples, hier, grf, d.viscosity, d.horizon, cfg.seed)
    arrays = {f"level_{l}": level_stack(samples, l) for l in range(len(hier.resolutions))}
    if cfg.benchmark == "darcy":
        for l in range(len(hier.resolutions)):
            arrays[f"coefficient_level_{l}"] = np.stack([s.coefficient[l] for s in samples])
    codes = np.zeros(cfg.n_samples, dtype=np.uint8)
    codes[split.val] = SPLIT_CODES["val"]
    codes[split.test] = SPLIT_CODES["test"]
    arrays["split"] = codes
    return arrays


def gen_data(cfg: ExperimentConfig) -> str:
    arrays = generate_dataset(cfg)
    h = dataset_hash(arrays)
    save_container(out_dir(cfg) / DATA_FILE, arrays, _metadata(cfg, h, kind="dataset"))
    return h


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    path = Path(cfg.output_dir) / DATA_FILE
    if not path.exists():
        raise PipelineError(f"{path} not found; run gen-data first")
    arrays, meta = load_container(path)
    h = read_metadata(meta)["dataset_hash"]
    if dataset_hash(arrays) != h:
        raise PipelineError(f"{path}: content does not match its recorded dataset hash")
    n = len(cfg.resolutions)
    levels = [arrays[f"level_{l}"] for l in range(n)]
    scale = field_scale(levels[-1][arrays["split"] == SPLIT_CODES["train"]])
    return Dataset([x / scale for x in levels], arrays["split"], h, scale)


def field_scale(train_finest: np.ndarray) -> float:
    """Root-mean-square of the finest training fields.

    Every level is divided by this single scalar before training so that the
    networks see unit-scale fields; NRMSE is unaffected by the rescaling.
    """
    rms = float(np.sqrt(np.mean(np.square(train_finest, dtype=np.float64))))
    if not np.isfinite(rms) or rms == 0.0:
        raise PipelineError("training fields are identically zero; cannot normalise")
    return rms


# --------------------------------------------------------------- statistics


def level_targets(levels, target: str):
    """Per-level ``(conditioning, regression target)`` pairs."""
    return [level_pairs(levels[l], levels[l + 1], target) for l in range(len(levels) - 1)]


def compute_stats(cfg: ExperimentConfig, data: Dataset, target: str = "residual") -> list[ResidualStats]:
    pairs = level_targets(data.part("train"), target)
    return [compute_residual_stats(t, level=l) for l, (_, t) in enumerate(pairs)]


def write_stats(cfg: ExperimentConfig, data: Dataset) -> list[ResidualStats]:
    stats = compute_stats(cfg, data)
    arrays = {f"sigma2_level_{s.level}": s.sigma2 for s in stats}
    save_container(out_dir(cfg) / STATS_FILE, arrays,
                   _metadata(cfg, data.hash, kind="stats", field_scale=data.scale))
    return stats


# -------------------------------------------------------------- checkpoints


def net_configs(cfg: ExperimentConfig) -> list[NetConfig]:
    return [NetConfig.sized(1, h, b) for h, b in zip(cfg.hidden, cfg.blocks)]


def save_checkpoint(path, model: CascadeModel, cfg: ExperimentConfig, data: Dataset, stage: str,
                    **extra) -> None:
    arrays = {}
    for l, net in enumerate(model.nets):
        arrays.update(state_arrays(net, prefix=f"level_{l}/"))
        arrays[f"sigma2_level_{l}"] = model.stats[l].sigma2
    meta = _metadata(cfg, data.hash, kind="checkpoint", stage=stage, field_scale=data.scale, target=model.target,
                     resolutions=list(model.hierarchy.resolutions), strict=model.hierarchy.strict,
                     nets=[net.cfg.to_dict() for net in model.nets],
                     sources=[[s.kind, s.tau, s.eps_num] for s in model.sources],
                     dtype=str(next(model.nets[0].parameters()).dtype).replace("torch.", ""),
                     **extra)
    save_container(path, arrays, meta)


def load_checkpoint(path) -> tuple[CascadeModel, dict]:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"checkpoint {path} not found")
    arrays, text = load_container(path)
    meta = read_metadata(text)
    dtype = getattr(torch, meta["dtype"])
    nets, stats = [], []
    for l, ncfg in enumerate(meta["nets"]):
        net = build_net(NetConfig(**ncfg), seed=0, dtype=dtype)
        load_state_arrays(net, arrays, prefix=f"level_{l}/")
        nets.append(net)
        stats.append(ResidualStats(l, arrays[f"sigma2_level_{l}"]))
    hier = GridHierarchy(tuple(meta["resolutions"]), strict=meta["strict"])
    sources = [SourceSpec(*s) for s in meta["sources"]]
    return CascadeModel(hier, nets, stats, sources, target=meta["target"]), meta


def _check_hash(meta: dict, data: Dataset, what: str) -> None:
    if meta.get("dataset_hash") != data.hash:
        raise PipelineError(f"{what} was produced from dataset {meta.get('dataset_hash')}, "
                            f"current dataset is {data.hash}")


def write_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["stage", "epoch", "train_loss", "val_nrmse", "lr"])
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- training


def variant_sources(cfg: ExperimentConfig, variant: str) -> list[SourceSpec]:
    kind = VARIANT_SOURCE.get(variant)
    return [s if kind is None else replace(s, kind=kind) for s in cfg.sources]


def _train_level_net(cfg, data: Dataset, level: int, target: str, sources, history):
    tr = data.part("train")
    c, t = level_pairs(tr[level], tr[level + 1], target)
    return pretrain_level(level, c, t, cfg.train, net_configs(cfg)[level], sources[level], history)


def train_level(cfg: ExperimentConfig, data: Dataset, level: int, history=None) -> Path:
    """Pretrain one level and store it as a one-level checkpoint ``level_<l>.mffm``."""
    if not 0 <= level < cfg.hierarchy.n_levels:
        raise PipelineError(f"level must be in [0, {cfg.hierarchy.n_levels - 1}]")
    net, st = _train_level_net(cfg, data, level, "residual", cfg.sources, history)
    res = cfg.resolutions
    model = CascadeModel(GridHierarchy((res[level], res[level + 1])), [net],
                         [ResidualStats(0, st.sigma2)], [cfg.sources[level]])
    path = out_dir(cfg) / f"level_{level}.mffm"
    save_checkpoint(path, model, cfg, data, stage="pretrain", level=level)
    return path


def _reusable_level(cfg: ExperimentConfig, data: Dataset, level: int):
    path = Path(cfg.output_dir) / f"level_{level}.mffm"
    if not path.exists():
        return None
    model, meta = load_checkpoint(path)
    if meta["dataset_hash"] != data.hash or meta["config"] != cfg.to_text():
        return None
    return model.nets[0], ResidualStats(level, model.stats[0].sigma2)


def pretrain_variant(cfg: ExperimentConfig, data: Dataset, variant: str = "none", history=None,
                     reuse_levels: bool = False) -> CascadeModel:
    """Level-wise flow-matching pretraining for a cascade or one of its ablations."""
    tr = data.part("train")
    res = cfg.resolutions
    sources = variant_sources(cfg, variant)
    if variant in ("single", "multires_single"):
        budget = sum(n_params(build_net(nc, 0)) for nc in net_configs(cfg))
        ncfg = matched_config(budget, max(cfg.blocks))
        direct = GridHierarchy((res[0], res[-1]), strict=False)
        if variant == "single":
            c, t = level_pairs(tr[0], tr[-1])
            net, st = pretrain_level(0, c, t, cfg.train, ncfg, sources[-1], history)
        else:
            pairs = level_targets(tr, "residual")
            net, _ = pretrain_level(0, [p[0] for p in pairs], [p[1] for p in pairs], cfg.train, ncfg,
                                    sources[-1], history)
            # evaluated as a direct coarsest-to-finest refiner, so its source
            # statistics are those of the direct residual
            st = compute_residual_stats(level_pairs(tr[0], tr[-1])[1], 0)
        return CascadeModel(direct, [net], [ResidualStats(0, st.sigma2)], [sources[-1]])
    target = "field" if variant == "field" else "residual"
    nets, stats = [], []
    for level in range(cfg.hierarchy.n_levels):
        reused = _reusable_level(cfg, data, level) if reuse_levels else None
        if reused is None:
            reused = _train_level_net(cfg, data, level, target, sources, history)
        nets.append(reused[0])
        stats.append(reused[1])
    return CascadeModel(cfg.hierarchy, nets, stats, sources, target=target)


def matched_config(budget: int, n_blocks: int) -> NetConfig:
    """Widest-fitting single network whose parameter count is closest to ``budget``."""
    best = None
    for h in range(32, 513, 8):
        ncfg = NetConfig.sized(1, h, n_blocks)
        gap = abs(n_params(build_net(ncfg, 0)) - budget)
        if best is None or gap < best[0]:
            best = (gap, ncfg)
    return best[1]


def finetune(cfg: ExperimentConfig, data: Dataset, model: CascadeModel, stochastic: bool = False,
             history=None) -> CascadeModel:
    tr, va = data.part("train"), data.part("val")
    if stochastic:
        return stochastic_e2e_finetune(model, tr[0], tr[-1], va[0], va[-1], cfg.train,
                                       cfg.k_train, cfg.k_val, history)
    return e2e_finetune(model, tr[0], tr[-1], va[0], va[-1], cfg.train, history)


def train_all(cfg: ExperimentConfig, data: Dataset) -> Path:
    history = []
    model = pretrain_variant(cfg, data, "none", history, reuse_levels=True)
    path = out_dir(cfg) / PRETRAINED_FILE
    save_checkpoint(path, model, cfg, data, stage="pretrain")
    write_log(out_dir(cfg) / "train_log_pretrain.csv", history)
    return path


def finetune_stage(cfg: ExperimentConfig, data: Dataset, stochastic: bool) -> tuple[Path, dict]:
    model, meta = load_checkpoint(Path(cfg.output_dir) / PRETRAINED_FILE)
    _check_hash(meta, data, PRETRAINED_FILE)
    history = []
    tuned = finetune(cfg, data, model, stochastic, history)
    name = STOCHASTIC_FILE if stochastic else E2E_FILE
    stage = "stochastic_e2e" if stochastic else "e2e"
    path = out_dir(cfg) / name
    save_checkpoint(path, tuned, cfg, data, stage=stage, selected=tuned.selected)
    write_log(out_dir(cfg) / f"train_log_{stage}.csv", history)
    return path, tuned.selected


# --------------------------------------------------------------- evaluation


def best_checkpoint(cfg: ExperimentConfig) -> Path:
    for name in (E2E_FILE, PRETRAINED_FILE):
        p = Path(cfg.output_dir) / name
        if p.exists():
            return p
    raise PipelineError("no checkpoint found; run train-all (and finetune-e2e) first")


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_pgm(path, frame: np.ndarray, lo: float, hi: float) -> None:
    """8-bit binary PGM (P5) of a 2-D frame scaled from [lo, hi]."""
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip(np.rint((frame - lo) * scale), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def predict(cfg: ExperimentConfig, data: Dataset) -> list[dict]:
    ckpt = best_checkpoint(cfg)
    model, meta = load_checkpoint(ckpt)
    _check_hash(meta, data, ckpt.name)
    te = data.part("test")
    pred = predict_deterministic(model, te[0])
    bil = prolong_chain(te[0], cfg.resolutions[1:])
    rows = [
        {"method": "bilinear", "nrmse": mean_nrmse(bil, te[-1]), "checkpoint": "", "dataset_hash": data.hash},
        {"method": "mffm-cascade", "nrmse": mean_nrmse(pred, te[-1]), "checkpoint": ckpt.name,
         "dataset_hash": data.hash},
    ]
    d = out_dir(cfg)
    # saved fields are in the physical units of the dataset
    sc = data.scale
    save_container(d / PREDICTIONS_FILE, {"prediction": pred * sc, "bilinear": bil * sc, "truth": te[-1] * sc},
                   _metadata(cfg, data.hash, kind="predictions", checkpoint=ckpt.name))
    write_rows(d / METRICS_FILE, rows)
    lo, hi = float(te[-1][0].min()), float(te[-1][0].max())
    for name, arr in (("truth", te[-1]), ("bilinear", bil), ("cascade", pred)):
        write_pgm(d / f"frame_{name}.pgm", arr[0, 0], lo, hi)
    write_pgm(d / "frame_abs_error.pgm", np.abs(pred - te[-1])[0, 0], 0.0,
              float(np.abs(bil - te[-1])[0, 0].max()))
    return rows


def nfe_stage(cfg: ExperimentConfig, data: Dataset, nfe_list=(1, 2, 5, 10, 50)) -> list[dict]:
    ckpt = best_checkpoint(cfg)
    model, meta = load_checkpoint(ckpt)
    _check_hash(meta, data, ckpt.name)
    te = data.part("test")
    rows = [{**r, "dataset_hash": data.hash} for r in nfe_scan(model, te[0], te[-1], nfe_list)]
    write_rows(out_dir(cfg) / NFE_FILE, rows)
    return rows


def uq_stage(cfg: ExperimentConfig, data: Dataset, k: int) -> UqReport:
    if k < 2:
        raise PipelineError("uq-eval needs --samples >= 2")
    path = Path(cfg.output_dir) / STOCHASTIC_FILE
    ckpt = path if path.exists() else best_checkpoint(cfg)
    model, meta = load_checkpoint(ckpt)
    _check_hash(meta, data, ckpt.name)
    te = data.part("test")
    ens = sample_stochastic_ensemble(model, te[0], k, seed=cfg.seed)
    rep = uq_metrics([ens.members[:, i] for i in range(te[0].shape[0])], list(te[-1]))
    row = {"checkpoint": ckpt.name, "k": k, **{n: getattr(rep, n) for n in UqReport.field_names()},
           "dataset_hash": data.hash}
    write_rows(out_dir(cfg) / UQ_FILE, [row])
    return rep


# ---------------------------------------------------------------- ablations


def evaluate_variant(cfg: ExperimentConfig, data: Dataset, model: CascadeModel, variant: str) -> float:
    te = data.part("test")
    if variant == "stochastic_e2e":
        return mean_nrmse(sample_stochastic_ensemble(model, te[0], cfg.k_val, seed=cfg.seed).mean, te[-1])
    return mean_nrmse(predict_deterministic(model, te[0]), te[-1])


def run_variant(cfg: ExperimentConfig, data: Dataset, variant: str) -> dict:
    """Train (pretrain + fine-tune) and evaluate one ablation variant."""
    d = out_dir(cfg) / "ablation" / variant
    d.mkdir(parents=True, exist_ok=True)
    history = []
    model = pretrain_variant(cfg, data, variant, history)
    model = finetune(cfg, data, model, stochastic=variant == "stochastic_e2e", history=history)
    save_checkpoint(d / "model.mffm", model, cfg.with_variant(variant), data, stage=variant,
                    selected=model.selected,
                    source_statistics="fields" if variant == "field" else "residuals")
    write_log(d / "train_log.csv", history)
    row = {"variant": "cascade" if variant == "none" else variant,
           "nrmse": evaluate_variant(cfg, data, model, variant),
           "n_params": sum(n_params(n) for n in model.nets),
           "source_statistics": "fields" if variant == "field" else "residuals",
           "dataset_hash": data.hash}
    write_rows(out_dir(cfg) / f"ablation_{variant}.csv", [row])
    return row


def run_ablation_matrix(cfg: ExperimentConfig, data: Dataset | None = None,
                        variants=MATRIX_VARIANTS) -> list[dict]:
    """Every variant under the shared seed; rows also written to ``ablation.csv``."""
    data = data or load_dataset(cfg)
    rows = [run_variant(cfg, data, v) for v in variants]
    for r in rows:
        r["benchmark"] = cfg.benchmark
    write_rows(out_dir(cfg) / "ablation.csv", rows)
    return rows


# ------------------------------------------------------------------- report


def write_report(cfg: ExperimentConfig) -> list[dict]:
    """Collect every result CSV in the output directory into ``report.csv``.

    Rows are ``(section, method, metric, value)``; the method names of the
    prediction section are ``bilinear`` and ``mffm-cascade``.
    """
    d = Path(cfg.output_dir)
    rows, hashes = [], set()

    def add(section, method, metric, value, h):
        hashes.add(h)
        rows.append({"section": section, "method": method, "metric": metric, "value": value,
                     "dataset_hash": h})

    if (d / METRICS_FILE).exists():
        for r in read_rows(d / METRICS_FILE):
            add("prediction", r["method"], "nrmse", r["nrmse"], r["dataset_hash"])
    for p in sorted(d.glob("ablation_*.csv")):
        for r in read_rows(p):
            add("ablation", r["variant"], "nrmse", r["nrmse"], r["dataset_hash"])
    if (d / NFE_FILE).exists():
        for r in read_rows(d / NFE_FILE):
            add("nfe_scan", f"nfe={r['nfe']}", "nrmse", r["nrmse"], r["dataset_hash"])
    if (d / UQ_FILE).exists():
        for r in read_rows(d / UQ_FILE):
            for name in UqReport.field_names():
                add("uq", f"k={r['k']}", name, r[name], r["dataset_hash"])
    if not rows:
        raise PipelineError(f"nothing to report in {d}")
    if len(hashes) > 1:
        raise PipelineError(f"refusing to mix results from datasets {sorted(hashes)}")
    write_rows(d / REPORT_FILE, rows)
    return rows


def summarize(rows: list[dict], key: str = "nrmse") -> str:
    return ", ".join(f"{r.get('method', r.get('variant'))}={float(r[key]):.5g}" for r in rows)
