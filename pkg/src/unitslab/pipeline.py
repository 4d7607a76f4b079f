"""Three-stage orchestration: pre-training, the intermediate stage, fine-tuning.

Every run directory is self-describing: run.json holds the resolved config, a
hash per stage, SHA-256 of every checkpoint, and the batch-order hashes, so
stage chaining re-verifies on load and cached stages are reused only when
their inputs are bit-identical. The CSV outputs are regenerated from run.json
in a fixed order, which makes reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .detector import DetectorConfig, det_loss, forward_scores, init_detector
from .evalkit import MetricsReport, evaluate
from .params import ParamSet, checkpoint_load, checkpoint_save
from .scene import Domain, LabeledSample, UnlabeledSample, load_manifest, load_split, strip_labels, write_dataset
from .tensor import Tape, Tensor, backward
from .params import sgd_step
from .units import (
    BranchPair,
    Strategy,
    UnitsHyper,
    dbds_step,
    dbss_step,
    sbss_step,
    select_init,
    step_seeds,
)

logger = logging.getLogger(__name__)

STAGE_TAG = {"pretrain": 1, "units": 2, "finetune": 3}
SPLITS = ("synth_pool", "real_train", "real_unlabeled", "real_test")


class TrainingDiverged(RuntimeError):
    def __init__(self, last_good: ParamSet, where: str):
        super().__init__(f"loss became non-finite during {where}")
        self.last_good = last_good


@dataclass(frozen=True)
class StagePlan:
    stage: str
    lr: float
    momentum: float
    epochs: int
    batch: int
    init_checkpoint: str | None = None
    lr_derived: bool = True
    epochs_derived: bool = True


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def derive_stage_plans(cfg: ExperimentConfig) -> tuple[StagePlan, StagePlan, StagePlan]:
    """Resolve the three stage plans; the intermediate stage derives lr and
    epochs from its neighbours (0.1x pre-training lr, 0.5x fine-tuning epochs)
    unless explicitly overridden."""
    pre = StagePlan(
        stage="pretrain",
        lr=cfg.pretrain.lr,
        momentum=cfg.pretrain.momentum,
        epochs=cfg.pretrain.epochs,
        batch=cfg.pretrain.batch,
        lr_derived=False,
        epochs_derived=False,
    )
    if cfg.units.lr is None:
        units_lr, lr_derived = 0.1 * pre.lr, True
    else:
        units_lr, lr_derived = cfg.units.lr, False
        if not 0.0 < units_lr <= pre.lr:
            raise ConfigError(
                f"units.lr override {units_lr} outside (0, pretrain.lr={pre.lr}]"
            )
    if cfg.units.epochs is None:
        units_epochs, epochs_derived = max(1, _round_half_up(0.5 * cfg.finetune.epochs)), True
    else:
        units_epochs, epochs_derived = cfg.units.epochs, False
        if units_epochs < 1:
            raise ConfigError(f"units.epochs override must be >= 1, got {units_epochs}")
    units = StagePlan(
        stage="units",
        lr=units_lr,
        momentum=cfg.pretrain.momentum if cfg.units.momentum is None else cfg.units.momentum,
        epochs=units_epochs,
        batch=cfg.units.synth_batch,
        init_checkpoint="pretrain.ckpt",
        lr_derived=lr_derived,
        epochs_derived=epochs_derived,
    )
    fine = StagePlan(
        stage="finetune",
        lr=cfg.finetune.lr,
        momentum=cfg.finetune.momentum,
        epochs=cfg.finetune.epochs,
        batch=cfg.finetune.batch,
        init_checkpoint=f"units-{cfg.units.strategy}/units.ckpt",
        lr_derived=False,
        epochs_derived=False,
    )
    return pre, units, fine


def units_hyper(cfg: ExperimentConfig) -> UnitsHyper:
    _, units_plan, _ = derive_stage_plans(cfg)
    return UnitsHyper(
        lr=units_plan.lr,
        momentum=units_plan.momentum,
        pseudo_threshold=cfg.units.pseudo_threshold,
        confidence_band=cfg.units.confidence_band,
        synth_batch=cfg.units.synth_batch,
        unlabeled_batch=cfg.units.unlabeled_batch,
        loss_weight_units=cfg.units.loss_weight_units,
        loss_weight_synth=cfg.units.loss_weight_synth,
        augment_synth_strong=cfg.units.augment_synth_strong,
    )


# ---------------------------------------------------------------------------
# data handling


@dataclass(frozen=True)
class LoadedData:
    synth_pool: list[LabeledSample]
    real_train: list[LabeledSample]
    real_unlabeled: list[UnlabeledSample]
    real_test: list[LabeledSample]


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "data"


def gen_data(cfg: ExperimentConfig) -> dict[str, Path]:
    """Write all four splits (synthetic pool plus the three real splits)."""
    root = data_dir(cfg)
    sizes = {
        "synth_pool": cfg.data.synth_pool,
        "real_train": cfg.data.real_train,
        "real_unlabeled": cfg.data.real_unlabeled,
        "real_test": cfg.data.real_test,
    }
    out: dict[str, Path] = {}
    for split in SPLITS:
        domain = Domain.SYNTHETIC if split == "synth_pool" else Domain.REAL
        dcfg = cfg.data.synthetic if domain is Domain.SYNTHETIC else cfg.data.real
        directory = root / split
        write_dataset(directory, sizes[split], domain, dcfg, cfg.data.split_seed(split))
        out[split] = directory
        logger.info("wrote %d %s samples to %s", sizes[split], domain.value, directory)
    return out


def _split_ok(cfg: ExperimentConfig, split: str) -> bool:
    directory = data_dir(cfg) / split
    if not (directory / "manifest.json").exists():
        return False
    domain_cfg = cfg.data.synthetic if split == "synth_pool" else cfg.data.real
    manifest = load_manifest(directory, expected_cfg=domain_cfg)
    expected = {
        "synth_pool": cfg.data.synth_pool,
        "real_train": cfg.data.real_train,
        "real_unlabeled": cfg.data.real_unlabeled,
        "real_test": cfg.data.real_test,
    }[split]
    if manifest.hash_matches is False or len(manifest.ids) != expected:
        return False
    return manifest.ids[0] == cfg.data.split_seed(split)

def ensure_data(cfg: ExperimentConfig) -> LoadedData:
    """Generate any missing/stale split, then load everything into memory."""
    if not all(_split_ok(cfg, split) for split in SPLITS):
        gen_data(cfg)
    root = data_dir(cfg)
    loaded = {split: load_split(load_manifest(root / split)) for split in SPLITS}
    return LoadedData(
        synth_pool=loaded["synth_pool"],
        real_train=loaded["real_train"],
        real_unlabeled=[strip_labels(s) for s in loaded["real_unlabeled"]],
        real_test=loaded["real_test"],
    )


# ---------------------------------------------------------------------------
# training loops


def _batch_tensors(samples: list[LabeledSample]) -> tuple[Tensor, np.ndarray]:
    images = np.stack([s.image for s in samples])[:, None, :, :]
    masks = np.stack([s.mask.astype(np.float64) for s in samples])[:, None, :, :]
    return Tensor(images), masks


def _supervised_stage(
    params: ParamSet,
    samples: list[LabeledSample],
    plan: StagePlan,
    seed: int,
    stage_label: str,
) -> tuple[ParamSet, list[tuple[str, int, float]], str]:
    """Plain det_loss training; returns (params, loss rows, batch-order hash)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([seed & (2**64 - 1), STAGE_TAG[plan.stage], 0xD47A])
    )
    order_hasher = hashlib.sha256()
    rows: list[tuple[str, int, float]] = []
    n = len(samples)
    for epoch in range(1, plan.epochs + 1):
        order = rng.permutation(n)
        order_hasher.update(order.astype("<i8").tobytes())
        losses: list[float] = []
        for start in range(0, n, plan.batch):
            chunk = [samples[int(i)] for i in order[start : start + plan.batch]]
            with Tape():
                images, masks = _batch_tensors(chunk)
                pred = forward_scores(params, images)
                loss = det_loss(pred, masks)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(params, f"{stage_label} epoch {epoch}")
                grads = backward(loss)
            try:
                params = sgd_step(params, grads, plan.lr, plan.momentum)
            except ValueError as e:
                raise TrainingDiverged(params, f"{stage_label} epoch {epoch}") from e
            losses.append(value)
        rows.append((stage_label, epoch, float(np.mean(losses))))
    return params, rows, order_hasher.hexdigest()


class _UnlabeledCycler:
    """Independent shuffled cycling over the unlabeled pool."""

    def __init__(self, pool: list[UnlabeledSample], batch: int, rng: np.random.Generator):
        self.pool = pool
        self.batch = batch
        self.rng = rng
        self.queue: list[int] = []

    def next_batch(self) -> list[UnlabeledSample]:
        take = min(self.batch, len(self.pool))
        while len(self.queue) < take:
            self.queue.extend(int(i) for i in self.rng.permutation(len(self.pool)))
        picked, self.queue = self.queue[:take], self.queue[take:]
        return [self.pool[i] for i in picked]


def _units_stage(
    init: ParamSet,
    strategy: Strategy,
    data: LoadedData,
    hp: UnitsHyper,
    aug,
    plan: StagePlan,
    seed: int,
    stage_label: str,
) -> tuple[ParamSet | BranchPair, list[tuple[str, int, float]], str]:
    """Run one strategy for plan.epochs passes over the synthetic pool."""
    seed64 = seed & (2**64 - 1)
    rng_synth = np.random.default_rng(np.random.SeedSequence([seed64, STAGE_TAG["units"], 0xD47A]))
    rng_unl = np.random.default_rng(np.random.SeedSequence([seed64, STAGE_TAG["units"], 0x0A11]))
    cycler = _UnlabeledCycler(data.real_unlabeled, hp.unlabeled_batch, rng_unl)
    state: ParamSet | BranchPair
    if strategy is Strategy.SBSS:
        state = init
    else:
        state = BranchPair(theta1=init, theta2=init)
    order_hasher = hashlib.sha256()
    rows: list[tuple[str, int, float]] = []
    n = len(data.synth_pool)
    step_index = 0
    for epoch in range(1, plan.epochs + 1):
        order = rng_synth.permutation(n)
        order_hasher.update(order.astype("<i8").tobytes())
        losses: list[float] = []
        for start in range(0, n, hp.synth_batch):
            synth = [data.synth_pool[int(i)] for i in order[start : start + hp.synth_batch]]
            unlabeled = cycler.next_batch()
            seeds = step_seeds(seed64, STAGE_TAG["units"], step_index)
            step_index += 1
            loss_out: list[float] = []
            try:
                if strategy is Strategy.SBSS:
                    state = sbss_step(state, synth, unlabeled, hp, aug, seeds, loss_out)
                elif strategy is Strategy.DBSS:
                    state = dbss_step(state, synth, unlabeled, hp, aug, seeds, loss_out)
                else:
                    state = dbds_step(state, synth, unlabeled, hp, aug, seeds, loss_out)
            except ValueError as e:
                raise TrainingDiverged(select_init(strategy, state), f"{stage_label} epoch {epoch}") from e
            if loss_out and not np.isfinite(loss_out[-1]):
                raise TrainingDiverged(select_init(strategy, state), f"{stage_label} epoch {epoch}")
            losses.extend(loss_out)
        rows.append((stage_label, epoch, float(np.mean(losses)) if losses else 0.0))
    return state, rows, order_hasher.hexdigest()


# ---------------------------------------------------------------------------
# run directories


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


class RunDir:
    """One seed's run directory plus its run.json bookkeeping."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.run_id = f"run-{seed}"
        self.root = Path(cfg.out_dir) / self.run_id
        self.root.mkdir(parents=True, exist_ok=True)
        self.log_path = self.root / "run.json"
        if self.log_path.exists():
            self.log = json.loads(self.log_path.read_text())
            if self.log.get("config_hash") != cfg.config_hash():
                logger.info("%s: config changed, clearing cached stage records", self.run_id)
                self.log["stages"] = {}
                self.log["metrics"] = {}
        else:
            self.log = {}
        self.log.setdefault("run_id", self.run_id)
        self.log.setdefault("seed", seed)
        self.log["config"] = cfg.to_dict()
        self.log["config_hash"] = cfg.config_hash()
        self.log.setdefault("stages", {})
        self.log.setdefault("metrics", {})

    # -- persistence

    def save(self) -> None:
        self.log_path.write_text(json.dumps(self.log, sort_keys=True, indent=1))
        self._write_losses_csv()
        self._write_metrics_csv()

    def _write_losses_csv(self) -> None:
        lines = ["stage,epoch,mean_loss"]
        for key in sorted(self.log["stages"]):
            for stage_label, epoch, value in self.log["stages"][key].get("loss_rows", []):
                lines.append(f"{stage_label},{epoch},{value:.10e}")
        (self.root / "losses.csv").write_text("\n".join(lines) + "\n")

    def _write_metrics_csv(self) -> None:
        from .evalkit import MetricsReport

        lines = [MetricsReport.csv_header()]
        for key in sorted(self.log["metrics"]):
            lines.append(self.log["metrics"][key])
        (self.root / "metrics.csv").write_text("\n".join(lines) + "\n")

    # -- stage caching

    def cached(self, key: str, stage_hash: str) -> bool:
        entry = self.log["stages"].get(key)
        if not entry or entry.get("stage_hash") != stage_hash:
            return False
        for rel, sha in entry.get("files", {}).items():
            path = self.root / rel
            if not path.exists() or _sha256_file(path) != sha:
                logger.warning("%s: checkpoint %s failed hash re-verification", self.run_id, rel)
                return False
        return True

    def record(
        self,
        key: str,
        stage_hash: str,
        files: dict[str, Path],
        loss_rows: list[tuple[str, int, float]],
        order_hash: str | None,
        extra: dict | None = None,
    ) -> None:
        self.log["stages"][key] = {
            "stage_hash": stage_hash,
            "files": {rel: _sha256_file(p) for rel, p in files.items()},
            "loss_rows": [list(r) for r in loss_rows],
            "batch_order_hash": order_hash,
            **(extra or {}),
        }
        self.save()

    def file_sha(self, key: str, rel: str) -> str:
        return self.log["stages"][key]["files"][rel]

    def record_metric(self, key: str, csv_row: str) -> None:
        self.log["metrics"][key] = csv_row
        self.save()

# ---------------------------------------------------------------------------
# stage runners (cached per run directory)


def _plan_dict(plan: StagePlan) -> dict:
    return {
        "stage": plan.stage,
        "lr": plan.lr,
        "momentum": plan.momentum,
        "epochs": plan.epochs,
        "batch": plan.batch,
        "lr_derived": plan.lr_derived,
        "epochs_derived": plan.epochs_derived,
    }


def run_pretrain(cfg: ExperimentConfig, seed: int, rd: RunDir, data: LoadedData) -> Path:
    """Supervised training on the synthetic pool from a fresh seeded init."""
    plan, _, _ = derive_stage_plans(cfg)
    stage_hash = _stable_hash(
        {"plan": _plan_dict(plan), "seed": seed, "data": cfg.to_dict()["data"]}
    )
    ckpt = rd.root / "pretrain.ckpt"
    if rd.cached("pretrain", stage_hash):
        return ckpt
    init_seed = int(np.random.SeedSequence([seed & (2**64 - 1), 0x1217]).generate_state(1)[0])
    params = init_detector(DetectorConfig(), init_seed)
    try:
        params, rows, order_hash = _supervised_stage(params, data.synth_pool, plan, seed, "pretrain")
    except TrainingDiverged as e:
        checkpoint_save(e.last_good, ckpt)
        raise
    checkpoint_save(params, ckpt)
    rd.record("pretrain", stage_hash, {"pretrain.ckpt": ckpt}, rows, order_hash,
              extra={"plan": _plan_dict(plan)})
    logger.info("%s: pretrain done (%d epochs, final loss %.4g)", rd.run_id, plan.epochs, rows[-1][2])
    return ckpt


def _variant_aug(cfg: ExperimentConfig, variant: str):
    from .augment import MULTI_AUG_MENU

    aug = cfg.units.aug_spec()
    if variant == "default":
        return aug
    if variant == "weak":
        return replace(aug, strong_enabled=False)
    if variant == "multi":
        return replace(aug, strong_enabled=True, strong_menu=MULTI_AUG_MENU)
    raise ValueError(f"unknown augmentation variant {variant!r}")


def units_stage_key(strategy: Strategy, variant: str = "default") -> str:
    suffix = "" if variant == "default" else f"-{variant}"
    return f"units-{strategy.value}{suffix}"


def run_units(
    cfg: ExperimentConfig,
    seed: int,
    rd: RunDir,
    data: LoadedData,
    strategy: Strategy,
    variant: str = "default",
) -> dict[str, Path]:
    """One strategy's intermediate stage, initialized from the pretrain checkpoint."""
    _, plan, _ = derive_stage_plans(cfg)
    hp = units_hyper(cfg)
    aug = _variant_aug(cfg, variant)
    pretrain_ckpt = run_pretrain(cfg, seed, rd, data)
    key = units_stage_key(strategy, variant)
    stage_hash = _stable_hash(
        {
            "plan": _plan_dict(plan),
            "seed": seed,
            "strategy": strategy.value,
            "variant": variant,
            "init_sha": rd.file_sha("pretrain", "pretrain.ckpt"),
            "units_cfg": cfg.to_dict()["units"],
        }
    )
    out_dir = rd.root / key
    names = ["theta.ckpt"] if strategy is Strategy.SBSS else ["theta1.ckpt", "theta2.ckpt"]
    files = {f"{key}/{n}": out_dir / n for n in names}
    files[f"{key}/units.ckpt"] = out_dir / "units.ckpt"
    if rd.cached(key, stage_hash):
        return {n: out_dir / n for n in [*names, "units.ckpt"]}
    out_dir.mkdir(parents=True, exist_ok=True)
    init = checkpoint_load(pretrain_ckpt)
    label = key
    try:
        state, rows, order_hash = _units_stage(init, strategy, data, hp, aug, plan, seed, label)
    except TrainingDiverged as e:
        checkpoint_save(e.last_good, out_dir / "units.ckpt")
        raise
    if strategy is Strategy.SBSS:
        checkpoint_save(state, out_dir / "theta.ckpt")
    else:
        checkpoint_save(state.theta1, out_dir / "theta1.ckpt")
        checkpoint_save(state.theta2, out_dir / "theta2.ckpt")
    selected = select_init(strategy, state)
    checkpoint_save(selected, out_dir / "units.ckpt")
    rd.record(key, stage_hash, files, rows, order_hash, extra={"plan": _plan_dict(plan)})
    logger.info("%s: %s done (%d epochs)", rd.run_id, key, plan.epochs)
    return {n: out_dir / n for n in [*names, "units.ckpt"]}


def run_finetune(
    cfg: ExperimentConfig,
    seed: int,
    rd: RunDir,
    data: LoadedData,
    arm: str,
    init_ckpt: Path,
    epochs: int | None = None,
) -> Path:
    """Supervised training on labeled real data from a given initialization."""
    _, _, plan = derive_stage_plans(cfg)
    if epochs is not None:
        plan = replace(plan, epochs=epochs)
    key = f"finetune-{arm}"
    stage_hash = _stable_hash(
        {
            "plan": _plan_dict(plan),
            "seed": seed,
            "arm": arm,
            "init_sha": _sha256_file(init_ckpt),
            "data": cfg.to_dict()["data"],
        }
    )
    out_dir = rd.root / key
    ckpt = out_dir / "final.ckpt"
    if rd.cached(key, stage_hash):
        return ckpt
    out_dir.mkdir(parents=True, exist_ok=True)
    params = checkpoint_load(init_ckpt)
    try:
        params, rows, order_hash = _supervised_stage(params, data.real_train, plan, seed, key)
    except TrainingDiverged as e:
        checkpoint_save(e.last_good, ckpt)
        raise
    checkpoint_save(params, ckpt)
    rd.record(key, stage_hash, {f"{key}/final.ckpt": ckpt}, rows, order_hash,
              extra={"plan": _plan_dict(plan), "init": str(init_ckpt)})
    logger.info("%s: %s done (%d epochs)", rd.run_id, key, plan.epochs)
    return ckpt


def evaluate_ckpt(cfg: ExperimentConfig, ckpt: Path, samples: list[LabeledSample]) -> MetricsReport:
    params = checkpoint_load(ckpt)
    return evaluate(params, samples, iou_threshold=cfg.eval.iou_threshold)


def run_full(cfg: ExperimentConfig, seed: int) -> dict[str, float]:
    """The complete pipeline of one seed: pretrain, units, fine-tune, evaluate."""
    data = ensure_data(cfg)
    rd = RunDir(cfg, seed)
    strategy = Strategy(cfg.units.strategy)
    pre_ckpt = run_pretrain(cfg, seed, rd, data)
    units_ckpts = run_units(cfg, seed, rd, data, strategy)
    final_ckpt = run_finetune(cfg, seed, rd, data, strategy.value, units_ckpts["units.ckpt"])
    summary: dict[str, float] = {}
    for stage, strat_label, ckpt in (
        ("pretrain", "none", pre_ckpt),
        ("units", strategy.value, units_ckpts["units.ckpt"]),
        ("finetune", strategy.value, final_ckpt),
    ):
        report = evaluate_ckpt(cfg, ckpt, data.real_test)
        rd.record_metric(
            f"{stage}|{strat_label}|real_test",
            report.csv_row(rd.run_id, stage, strat_label, "real_test"),
        )
        summary[stage] = report.fmeasure
        logger.info("%s: %s F=%.4f", rd.run_id, stage, report.fmeasure)
    return summary

# ---------------------------------------------------------------------------
# ablations


ABLATIONS = ("strategies", "augmentation", "extended_baseline", "direct_test")


def _arm_reports(cfg: ExperimentConfig, which: str, seed: int) -> list[tuple[str, MetricsReport]]:
    data = ensure_data(cfg)
    rd = RunDir(cfg, seed)
    test = data.real_test
    reports: list[tuple[str, MetricsReport]] = []

    def finetuned(arm: str, init: Path, epochs: int | None = None) -> MetricsReport:
        return evaluate_ckpt(cfg, run_finetune(cfg, seed, rd, data, arm, init, epochs), test)

    if which == "strategies":
        dbss = run_units(cfg, seed, rd, data, Strategy.DBSS)
        sbss = run_units(cfg, seed, rd, data, Strategy.SBSS)
        dbds = run_units(cfg, seed, rd, data, Strategy.DBDS)
        # the baseline fine-tunes from the DBSS branch that saw synthetic data
        # only, isolating the effect of the unlabeled stream
        reports.append(("baseline", finetuned("baseline", dbss["theta1.ckpt"])))
        reports.append(("sbss", finetuned("sbss", sbss["units.ckpt"])))
        reports.append(("dbss", finetuned("dbss", dbss["units.ckpt"])))
        reports.append(("dbds", finetuned("dbds", dbds["units.ckpt"])))
    elif which == "augmentation":
        strong = run_units(cfg, seed, rd, data, Strategy.DBSS)
        weak = run_units(cfg, seed, rd, data, Strategy.DBSS, variant="weak")
        reports.append(("baseline", finetuned("baseline", strong["theta1.ckpt"])))
        reports.append(("weak", finetuned("aug-weak", weak["units.ckpt"])))
        reports.append(("strong", finetuned("dbss", strong["units.ckpt"])))
        if cfg.ablation.include_multi_augmentation:
            multi = run_units(cfg, seed, rd, data, Strategy.DBSS, variant="multi")
            reports.append(("multi", finetuned("aug-multi", multi["units.ckpt"])))
    elif which == "extended_baseline":
        dbss = run_units(cfg, seed, rd, data, Strategy.DBSS)
        extended = _round_half_up(cfg.ablation.extended_baseline_factor * cfg.finetune.epochs)
        reports.append(("baseline", finetuned("baseline", dbss["theta1.ckpt"])))
        reports.append(
            ("baseline_extended", finetuned("baseline-extended", dbss["theta1.ckpt"], extended))
        )
        reports.append(("dbss", finetuned("dbss", dbss["units.ckpt"])))
    elif which == "direct_test":
        pre_ckpt = run_pretrain(cfg, seed, rd, data)
        units_ckpts = run_units(cfg, seed, rd, data, Strategy.DBSS)
        reports.append(("pretrain", evaluate_ckpt(cfg, pre_ckpt, test)))
        reports.append(("units", evaluate_ckpt(cfg, units_ckpts["units.ckpt"], test)))
    else:
        raise ConfigError(f"unknown ablation {which!r}; valid: {', '.join(ABLATIONS)}")
    return reports


def run_ablation(cfg: ExperimentConfig, which: str) -> Path:
    """Run one ablation over all configured seeds; returns the CSV path.

    The CSV holds one row per (method, seed) plus aggregate rows with the
    median and interquartile range per method.
    """
    if which not in ABLATIONS:
        raise ConfigError(f"unknown ablation {which!r}; valid: {', '.join(ABLATIONS)}")
    per_method: dict[str, list[tuple[int, MetricsReport]]] = {}
    method_order: list[str] = []
    for seed in cfg.seeds:
        for method, report in _arm_reports(cfg, which, seed):
            if method not in per_method:
                per_method[method] = []
                method_order.append(method)
            per_method[method].append((seed, report))
        logger.info("ablation %s: seed %d done", which, seed)
    lines = ["method,seed,precision,recall,fmeasure"]
    for method in method_order:
        for seed, r in per_method[method]:
            lines.append(f"{method},{seed},{r.precision:.6f},{r.recall:.6f},{r.fmeasure:.6f}")
    for method in method_order:
        for agg_name, agg in (("median", np.median), ("iqr", _iqr)):
            ps = [r.precision for _, r in per_method[method]]
            rs = [r.recall for _, r in per_method[method]]
            fs = [r.fmeasure for _, r in per_method[method]]
            lines.append(
                f"{method},{agg_name},{agg(ps):.6f},{agg(rs):.6f},{agg(fs):.6f}"
            )
    out = Path(cfg.out_dir) / "ablations"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{which}.csv"
    path.write_text("\n".join(lines) + "\n")
    logger.info("ablation %s written to %s", which, path)
    return path


def _iqr(values) -> float:
    return float(np.percentile(values, 75) - np.percentile(values, 25))
