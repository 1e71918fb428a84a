"""Training loop, evaluation, checkpoints, grid search and ablations."""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, stream_seed
from .data import DataError, DatasetSplit, InstanceSet, generate_synthetic
from .metrics import ScoredInstances, evaluate
from .model import ModelConfig, Surge, parameter_count

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "surge-checkpoint/1"


class DivergenceError(Exception):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"loss became {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class RunReport:
    best_epoch: int
    epochs_run: int
    validation: dict
    test: dict
    config_hash: str
    dataset_hash: str
    param_count: int
    train_loss: list[float]
    validation_gauc: list[float]
    epoch_seconds: list[float] = field(default_factory=list)

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("epoch_seconds")
        return d

    def to_json(self, timing: bool = False) -> str:
        """Canonical form excludes wall-clock timings, which never reproduce."""
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class TrainResult:
    report: RunReport
    model: Surge
    config: RunConfig


def load_dataset(cfg: RunConfig) -> DatasetSplit:
    if cfg.data_dir:
        return load_split_dir(cfg.data_dir)
    return generate_synthetic(
        cfg.synth_users, cfg.synth_items, cfg.synth_clusters, cfg.synth_seq_len,
        cfg.synth_noise, seed=cfg.seed, neg_ratio=cfg.neg_ratio,
        train_targets=cfg.synth_train_targets, max_len=cfg.max_len,
    )


def save_split_dir(ds: DatasetSplit, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        ds.split(name).save(out / f"{name}.txt")
    meta = {
        "format": "surge-split/1",
        "max_len": ds.max_len,
        "item_vocab_size": ds.item_vocab_size,
        "user_index": ds.user_index,
        "item_index": ds.item_index,
        "digest": ds.digest(),
        "info": {k: v for k, v in ds.info.items() if k == "num_clusters"},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_split_dir(path: str | Path) -> DatasetSplit:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read split directory {path}: {e}") from None
    max_len = meta["max_len"]
    splits = [InstanceSet.load(path / f"{n}.txt", max_len) for n in ("train", "validation", "test")]
    return DatasetSplit(*splits, item_vocab_size=meta["item_vocab_size"],
                        user_index=meta["user_index"], item_index=meta.get("item_index", {}))


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.double else torch.float32


def build_model(cfg: RunConfig, num_items: int) -> Surge:
    torch.manual_seed(stream_seed(cfg.seed, "init"))
    model = Surge(cfg.model_config(num_items))
    return model.to(_dtype(cfg))


def _tensors(inst: InstanceSet, idx=None):
    if idx is not None:
        inst = inst.subset(idx)
    return torch.from_numpy(inst.item_seq), torch.from_numpy(inst.target), torch.from_numpy(inst.label)


@torch.no_grad()
def score(model: Surge, inst: InstanceSet, batch_size: int = 2000) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(inst), batch_size):
        seq, tgt, _ = _tensors(inst, slice(start, start + batch_size))
        out.append(model(seq, tgt).prob.double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def scored(inst: InstanceSet, scores: np.ndarray) -> ScoredInstances:
    return ScoredInstances(inst.user, scores, inst.label, inst.valid_len, inst.group, inst.target)


def evaluate_split(model: Surge, inst: InstanceSet, batch_size: int = 2000) -> dict:
    return evaluate(scored(inst, score(model, inst, batch_size)))


def train_epoch(model, optimizer, data: InstanceSet, cfg: RunConfig, epoch: int) -> float:
    rng = np.random.default_rng(stream_seed(cfg.seed, f"shuffle-{epoch}"))
    perm = rng.permutation(len(data))
    model.train()
    losses = []
    for batch, start in enumerate(range(0, len(perm), cfg.batch_size)):
        seq, tgt, lab = _tensors(data, perm[start:start + cfg.batch_size])
        out = model(seq, tgt)
        loss = model.objective(out, lab, cfg.l2, cfg.reg_weights)
        if not torch.isfinite(loss):
            raise DivergenceError(epoch, batch, loss.item())
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return float(np.mean(losses))


def train(cfg: RunConfig, dataset: DatasetSplit | None = None, out_dir: str | Path | None = None) -> TrainResult:
    """Adam training with early stopping on validation GAUC; keeps the best epoch."""
    cfg.validate()
    torch.use_deterministic_algorithms(True)
    ds = dataset if dataset is not None else load_dataset(cfg)
    if ds.max_len != cfg.max_len:
        cfg = cfg.replace(max_len=ds.max_len).validate()
    if not len(ds.train):
        raise ConfigError("training split is empty")

    model = build_model(cfg, ds.item_vocab_size)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    best_state, best_gauc, best_epoch = None, -math.inf, 0
    losses, val_curve, seconds = [], [], []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        losses.append(train_epoch(model, optimizer, ds.train, cfg, epoch))
        seconds.append(time.perf_counter() - tic)
        val = evaluate_split(model, ds.validation, cfg.eval_batch_size)
        g = val["gauc"] if val["gauc"] is not None else -math.inf
        val_curve.append(g)
        logger.info("epoch %d loss %.5f val gauc %.5f (%.1fs)", epoch, losses[-1], g, seconds[-1])
        if g > best_gauc:
            best_gauc, best_epoch = g, epoch
            best_state = copy.deepcopy(model.state_dict())
        if epoch - best_epoch >= cfg.patience:
            break

    model.load_state_dict(best_state)
    report = RunReport(
        best_epoch=best_epoch,
        epochs_run=epoch,
        validation=evaluate_split(model, ds.validation, cfg.eval_batch_size),
        test=evaluate_split(model, ds.test, cfg.eval_batch_size),
        config_hash=cfg.hash(),
        dataset_hash=ds.digest(),
        param_count=parameter_count(model),
        train_loss=losses,
        validation_gauc=val_curve,
        epoch_seconds=seconds,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, cfg, out / "checkpoint.pt")
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "timing.json").write_text(json.dumps({"epoch_seconds": seconds}) + "\n", encoding="utf-8")
    return TrainResult(report, model, cfg)


# -- checkpoints ---------------------------------------------------------------
# Container fields, in order: format, config_hash, run_config, model_config, state_dict.


def save_checkpoint(model: Surge, cfg: RunConfig, path: str | Path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config_hash": cfg.hash(),
        "run_config": cfg.to_dict(),
        "model_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path: str | Path) -> tuple[Surge, RunConfig]:
    if not Path(path).is_file():
        raise ConfigError(f"{path}: no such checkpoint")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    cfg = RunConfig(**blob["run_config"])
    model = Surge(ModelConfig(**blob["model_config"])).to(_dtype(cfg))
    model.load_state_dict(blob["state_dict"])
    if cfg.hash() != blob["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    return model, cfg


# -- grid search ----------------------------------------------------------------

def default_grids(cfg: RunConfig) -> dict[str, list]:
    # one value drives all three assignment regularizers (see grid_search)
    return {"l2": list(cfg.l2_grid), "reg_m": list(cfg.reg_grid), "pooled_len": list(cfg.pooled_len_grid)}


def grid_search(cfg: RunConfig, grids: dict[str, list] | None = None,
                dataset: DatasetSplit | None = None) -> tuple[RunConfig, list[tuple[RunConfig, RunReport]]]:
    """Exhaustive product over ``grids`` (field name -> values); best by validation GAUC.

    When ``reg_m`` is gridded but ``reg_a``/``reg_p`` are not, they follow
    ``reg_m``. Ties go to the earlier grid point.
    """
    if grids is None:
        grids = default_grids(cfg)
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ConfigError("empty grid")
    ds = dataset if dataset is not None else load_dataset(cfg)
    keys = list(grids)
    results = []
    for values in itertools.product(*(grids[k] for k in keys)):
        changes = dict(zip(keys, values))
        if "reg_m" in changes and "reg_a" not in grids and "reg_p" not in grids:
            changes.update(reg_a=changes["reg_m"], reg_p=changes["reg_m"])
        run_cfg = cfg.replace(**changes)
        results.append((run_cfg, train(run_cfg, ds).report))
        logger.info("grid %s -> val gauc %s", changes, results[-1][1].validation["gauc"])
    best = max(results, key=lambda r: (r[1].validation["gauc"] or -math.inf))
    return best[0], results


# -- ablations --------------------------------------------------------------------

ABLATIONS = [
    ("fusion", "w/o Fusion", {"fusion": False}),
    ("fusion", "w/o Query-aware", {"query_aware": False}),
    ("fusion", "w/o Cluster-aware", {"cluster_aware": False}),
    ("fusion", "w/ Fusion", {}),
    ("extraction", "w/o Extraction", {"extraction": False}),
    ("extraction", "w/o Readout", {"readout": False}),
    ("extraction", "w/o Regularization", {"regularization": False}),
    ("extraction", "w/ Extraction", {}),
    ("evolution", "GRU", {"evolution": "gru"}),
    ("evolution", "AUGRU", {"evolution": "augru"}),
]


def ablate(cfg: RunConfig, dataset: DatasetSplit | None = None, variants=ABLATIONS) -> list[dict]:
    """Train every ablation variant; the unmodified config is trained once and reused."""
    ds = dataset if dataset is not None else load_dataset(cfg)
    cache: dict[str, RunReport] = {}
    rows = []
    for block, name, changes in variants:
        run_cfg = cfg.replace(**changes)
        key = run_cfg.hash()
        if key not in cache:
            cache[key] = train(run_cfg, ds).report
        rep = cache[key]
        rows.append({
            "block": block, "variant": name,
            "auc": rep.test["auc"], "gauc": rep.test["gauc"], "mrr": rep.test["mrr"],
            "params": rep.param_count,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'block':<11} {'variant':<20} {'AUC':>8} {'GAUC':>8} {'MRR':>8} {'params':>9}"]
    for r in rows:
        lines.append(
            f"{r['block']:<11} {r['variant']:<20} {_fmt(r['auc'])} {_fmt(r['gauc'])} {_fmt(r['mrr'])} {r['params']:>9}"
        )
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:>8.4f}" if v is not None else f"{'n/a':>8}"
