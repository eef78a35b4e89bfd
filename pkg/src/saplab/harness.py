"""Experiment orchestration: seeds, the erratum grid, findings and reports.

One global seed fans out to every sub-seed (data, init, shuffling, SAP
streams, attack targets). Cells are evaluated in id order and the report is
assembled from them in that order, so two runs with the same seed write the
same bytes. Wall-clock timings are kept out of the JSON report and written to
a sidecar file instead.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from saplab import __version__, attacks, data, dumps, network, rng
from saplab.errors import ConfigurationError
from saplab.sap import SapConfig, averaged_predict

log = logging.getLogger(__name__)

ATTACKS = ("none", "vanilla", "through_sap", "transfer", "bpda")
CSV_COLUMNS = (
    "cell_id",
    "r_multiplier",
    "scheme",
    "K",
    "oracle",
    "targeted",
    "epsilon",
    "clean_acc",
    "adv_acc",
    "success_rate",
    "stderr",
    "seconds",
)

# epsilon picked by calibrate_epsilon() on the reference benchmark: the
# smallest value on a 0.01 grid where undefended white-box PGD succeeds on
# more than 95% of the test points (0.13 -> 0.926, 0.14 -> 0.980). This is a
# property of the synthetic data geometry.
REFERENCE_EPSILON = 0.14

_SEED_TAGS = {"data": 11, "init": 12, "shuffle": 13, "sap": 14, "target": 15}


def derive_seeds(global_seed: int) -> dict[str, int]:
    return {
        name: int(rng.stream_key(global_seed, tag)[0] >> np.uint64(33)) for name, tag in _SEED_TAGS.items()
    }


@dataclass(frozen=True)
class Cell:
    """One evaluation: a defense (None = undefended), an attack, and optionally
    a different defense to consult while attacking (cross-scheme runs)."""

    cell_id: str
    defense: SapConfig | None
    attack: str = "none"
    targeted: bool = False
    eot_samples: int = 1
    attack_defense: SapConfig | None = None

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ConfigurationError(f"attack must be one of {ATTACKS}, got {self.attack!r}")
        if self.defense is None and self.attack not in ("none", "vanilla"):
            raise ConfigurationError(f"cell {self.cell_id}: attack {self.attack!r} needs a defense")

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "defense": None if self.defense is None else self.defense.to_dict(),
            "attack": self.attack,
            "targeted": self.targeted,
            "eot_samples": self.eot_samples,
            "attack_defense": None if self.attack_defense is None else self.attack_defense.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, seed: int) -> "Cell":
        def sap_of(v):
            return None if v is None else SapConfig.from_dict({**v, "seed": seed})

        return cls(
            d["cell_id"],
            sap_of(d.get("defense")),
            d.get("attack", "none"),
            bool(d.get("targeted", False)),
            int(d.get("eot_samples", 1)),
            sap_of(d.get("attack_defense")),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: dict = field(default_factory=dict)  # DataParams fields except seed
    widths: tuple[int, ...] = network.REFERENCE_WIDTHS
    train: dict = field(default_factory=lambda: {"learning_rate": 0.05, "epochs": 20, "batch_size": 32})
    attack: dict = field(default_factory=lambda: {"epsilon": REFERENCE_EPSILON, "iterations": 200, "eval_every": 10})
    reference_passes: int = 100
    eot_sweep: tuple[int, ...] = (4, 16)
    checkpoint: str | None = None
    dataset: str | None = None
    defenses: tuple[dict, ...] = ()
    cells: tuple[dict, ...] = ()

    @property
    def seeds(self) -> dict[str, int]:
        return derive_seeds(self.seed)

    def data_params(self) -> data.DataParams:
        if "seed" in self.data:
            raise ConfigurationError("data seed is derived from the global seed; remove data.seed")
        return data.DataParams(**self.data, seed=self.seeds["data"])

    def mlp_spec(self) -> network.MlpSpec:
        return network.MlpSpec(tuple(self.widths), self.seeds["init"])

    def train_config(self) -> network.TrainConfig:
        return network.TrainConfig(**self.train, shuffle_seed=self.seeds["shuffle"])

    def attack_config(self, **overrides) -> attacks.AttackConfig:
        return attacks.AttackConfig(**{**self.attack, "target_seed": self.seeds["target"], **overrides})

    def sap(self, r_multiplier: float, scheme: str, passes: int, average: str = "probabilities") -> SapConfig:
        return SapConfig(r_multiplier, scheme, passes, self.seeds["sap"], average)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": dict(self.data),
            "widths": list(self.widths),
            "train": dict(self.train),
            "attack": dict(self.attack),
            "reference_passes": self.reference_passes,
            "eot_sweep": list(self.eot_sweep),
            "checkpoint": self.checkpoint,
            "dataset": self.dataset,
            "defenses": [dict(d) for d in self.defenses],
            "cells": [dict(c) for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys {sorted(unknown)}")
        d = dict(d)
        for key in ("widths", "eot_sweep", "defenses", "cells"):
            if key in d:
                d[key] = tuple(d[key])
        base = cls()
        for key in ("train", "attack"):
            if key in d:
                d[key] = {**getattr(base, key), **d[key]}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- lab state ---------------------------------------------------------------


class Lab:
    """Dataset plus trained network for one config, with cached clean
    evaluations."""

    def __init__(self, config: ExperimentConfig, dataset: data.SyntheticDataset, net: network.Network, meta: dict):
        self.config = config
        self.dataset = dataset
        self.network = net
        self.meta = meta
        self._clean: dict[SapConfig, np.ndarray] = {}

    @property
    def x(self) -> np.ndarray:
        return self.dataset.test.x

    @property
    def y(self) -> np.ndarray:
        return self.dataset.test.y

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.y), dtype=np.int64)

    def clean_predictions(self, defense: SapConfig | None) -> np.ndarray:
        if defense is None:
            return network.predict_clean(self.network, self.x)[0]
        if defense not in self._clean:
            self._clean[defense] = averaged_predict(self.network, self.x, defense, self.ids)[0]
        return self._clean[defense]

    def clean_accuracy(self, defense: SapConfig | None) -> float:
        return float(np.mean(self.clean_predictions(defense) == self.y))


def build_dataset(config: ExperimentConfig) -> data.SyntheticDataset:
    if config.dataset:
        return data.load_dataset(config.dataset)
    return data.make_dataset(config.data_params())


def train_network(config: ExperimentConfig, dataset: data.SyntheticDataset) -> tuple[network.Network, dict]:
    result = network.train(
        network.init_network(config.mlp_spec()), dataset.train.x, dataset.train.y, config.train_config()
    )
    net = result.network
    meta = {
        "train_accuracy": network.accuracy(net, dataset.train.x, dataset.train.y),
        "test_accuracy": network.accuracy(net, dataset.test.x, dataset.test.y),
        "loss_trace": result.loss_trace,
        "seeds": {"init": config.seeds["init"], "shuffle": config.seeds["shuffle"]},
        "train_config": config.train_config().to_dict(),
    }
    return net, meta


def build_lab(config: ExperimentConfig) -> Lab:
    dataset = build_dataset(config)
    if config.checkpoint:
        net, meta = network.load_checkpoint(config.checkpoint)
    else:
        net, meta = train_network(config, dataset)
    if net.spec.widths[0] != dataset.params.dim or net.spec.n_classes != dataset.params.n_classes:
        raise ConfigurationError("network widths do not match the dataset's dimension and class count")
    return Lab(config, dataset, net, meta)


# -- cells -------------------------------------------------------------------


def _rate(k: float, n: int) -> dict:
    return {"rate": k, "n": n, "stderr": attacks.binomial_stderr(k, n)}


def run_cell(lab: Lab, cell: Cell, dump_dir: Path | None = None) -> dict:
    """Evaluate one cell; returns its report entry (timing excluded)."""
    cfg = lab.config
    x, y, ids = lab.x, lab.y, lab.ids
    n = len(y)
    defense = cell.defense
    attack_cfg = cfg.attack_config(
        targeted=cell.targeted,
        eot_samples=cell.eot_samples,
        oracle={"none": "vanilla", "transfer": "vanilla"}.get(cell.attack, cell.attack),
    )
    if attack_cfg.eval_passes is not None and defense is not None:
        defense = replace(defense, passes=attack_cfg.eval_passes)

    entry: dict = {"cell": cell.to_dict(), "n": n}
    clean_k = lab.clean_accuracy(defense)
    entry["clean_accuracy"] = _rate(clean_k, n)
    if defense is not None:
        entry["clean_accuracy_single_pass"] = _rate(lab.clean_accuracy(replace(defense, passes=1)), n)
    else:
        entry["clean_accuracy_single_pass"] = _rate(clean_k, n)

    targets = None
    if cell.targeted:
        targets = attacks.draw_targets(y, lab.network.spec.n_classes, attack_cfg.target_seed, ids)

    if cell.attack == "none":
        pred = lab.clean_predictions(defense)
        result = attacks.AdvResult(x.copy(), pred, pred != y, np.zeros(n, dtype=np.int64))
    elif cell.attack == "transfer":
        result, _ = attacks.transfer_attack(lab.network, defense, x, y, attack_cfg, ids, targets)
    else:
        judge_defense = cell.attack_defense or defense
        judge = (
            attacks.clean_judge(lab.network)
            if judge_defense is None
            else attacks.defended_judge(lab.network, judge_defense)
        )
        oracle = attacks.make_oracle(attack_cfg.oracle, lab.network, defense, cell.eot_samples)
        result = attacks.pgd(oracle, x, y, attack_cfg, judge, ids, targets)
        if cell.attack_defense is not None:
            # crafted against one defense, scored on the cell's own defense
            result.predictions = averaged_predict(lab.network, result.x_adv, defense, ids)[0]

    stats = attacks.summarize(result, y, targets, cell.targeted)
    entry["adv_accuracy"] = _rate(stats.adv_accuracy, n)
    entry["untargeted_success"] = _rate(stats.untargeted_success, n)
    entry["targeted_success"] = None if targets is None else _rate(stats.targeted_success, n)
    entry["success_rate"] = _rate(stats.success_rate, n)
    entry["epsilon"] = 0.0 if cell.attack == "none" else attack_cfg.epsilon
    entry["mean_iterations"] = float(np.mean(result.iterations_used))
    linf = float(np.max(np.abs(result.x_adv - x))) if n else 0.0
    entry["max_linf"] = linf
    if cell.attack != "none" and dump_dir is not None:
        dumps.save_adversarial(dump_dir / f"{cell.cell_id}.sapx", result.x_adv, y, targets)
    return entry


def erratum_cells(config: ExperimentConfig) -> list[Cell]:
    """The fixed grid: undefended plus three SAP settings, four attacks, both
    sampling schemes, and the extra cells the findings need."""
    k = config.reference_passes
    rows = [("m1-k%d" % k, 1.0, k), ("m1-k1", 1.0, 1), ("m2-k1", 2.0, 1)]
    cells = [Cell("c00-undefended-none", None, "none"), Cell("c01-undefended-vanilla", None, "vanilla")]
    i = 2
    for scheme in ("multinomial", "binomial"):
        for name, mult, passes in rows:
            for attack in ("none", "through_sap", "transfer", "bpda"):
                cells.append(Cell(f"c{i:02d}-{name}-{scheme}-{attack}", config.sap(mult, scheme, passes), attack))
                i += 1
    ref = config.sap(1.0, "multinomial", k)
    for eot in config.eot_sweep:
        cells.append(Cell(f"c{i:02d}-m1-k{k}-multinomial-through_sap-eot{eot}", ref, "through_sap", eot_samples=eot))
        i += 1
    cells.append(
        Cell(
            f"c{i:02d}-m1-k{k}-multinomial-bpda-from-binomial",
            ref,
            "bpda",
            attack_defense=config.sap(1.0, "binomial", k),
        )
    )
    i += 1
    for attack in ("through_sap", "transfer", "bpda"):
        cells.append(Cell(f"c{i:02d}-m1-k{k}-multinomial-{attack}-targeted", ref, attack, targeted=True))
        i += 1
    cells.append(Cell(f"c{i:02d}-m1-k{k}-multinomial-none-logit-average", config.sap(1.0, "multinomial", k, "logits")))
    return cells


# -- findings ----------------------------------------------------------------


def _find(cells: dict, suffix: str) -> dict | None:
    hits = [c for cid, c in cells.items() if cid.split("-", 1)[1] == suffix]
    return hits[0] if hits else None


def _strictly_above(high: dict, low: dict) -> tuple[bool, float, float]:
    """Gap between two success rates and the margin it must clear: 5 points or
    3 standard errors of the difference, whichever is larger."""
    gap = high["rate"] - low["rate"]
    se = math.sqrt(high["stderr"] ** 2 + low["stderr"] ** 2)
    need = max(0.05, 3.0 * se)
    return gap >= need, gap, need


def evaluate_findings(cells: dict, config: ExperimentConfig) -> list[dict]:
    k = config.reference_passes
    out: list[dict] = []

    def add(fid: str, description: str, passed: bool, **values):
        out.append({"id": fid, "description": description, "passed": bool(passed), "values": values})

    und = _find(cells, "undefended-none")
    wb = _find(cells, "undefended-vanilla")
    if und and wb:
        add(
            "calibration",
            "undefended clean accuracy >= 0.95 and white-box success > 0.95 at the configured epsilon",
            und["clean_accuracy"]["rate"] >= 0.95 and wb["untargeted_success"]["rate"] > 0.95,
            clean_accuracy=und["clean_accuracy"]["rate"],
            whitebox_success=wb["untargeted_success"]["rate"],
        )

    for scheme in ("multinomial", "binomial"):
        m1 = _find(cells, f"m1-k1-{scheme}-none")
        m2 = _find(cells, f"m2-k1-{scheme}-none")
        ref = _find(cells, f"m1-k{k}-{scheme}-none")
        if m1 and m2:
            a1, a2 = m1["clean_accuracy"]["rate"], m2["clean_accuracy"]["rate"]
            add(
                f"erratum-single-pass-{scheme}",
                "single-pass clean accuracy at r = m is no higher than at r = 2m",
                a1 <= a2,
                r1_single_pass=a1,
                r2_single_pass=a2,
                margin=a2 - a1,
            )
        if ref and und:
            a, u = ref["clean_accuracy"]["rate"], und["clean_accuracy"]["rate"]
            add(
                f"erratum-averaging-{scheme}",
                f"r = m with {k}-pass averaging is within 2 points of undefended clean accuracy",
                abs(a - u) <= 0.02,
                averaged=a,
                undefended=u,
            )

    through = _find(cells, f"m1-k{k}-multinomial-through_sap")
    transfer = _find(cells, f"m1-k{k}-multinomial-transfer")
    bpda = _find(cells, f"m1-k{k}-multinomial-bpda")
    clean_ref = _find(cells, f"m1-k{k}-multinomial-none")
    if through and transfer and bpda and clean_ref:
        ok1, gap1, need1 = _strictly_above(transfer["untargeted_success"], through["untargeted_success"])
        ok2, gap2, need2 = _strictly_above(bpda["untargeted_success"], transfer["untargeted_success"])
        bpda_acc = bpda["adv_accuracy"]["rate"]
        clean_acc = clean_ref["clean_accuracy"]["rate"]
        add(
            "attack-hierarchy",
            "untargeted success through_sap < transfer < bpda, each gap >= max(5 points, 3 SE); "
            "bpda leaves < 10% accuracy while the no-attack defended accuracy is >= 90%",
            ok1 and ok2 and bpda_acc < 0.10 and clean_acc >= 0.90,
            through_sap=through["untargeted_success"]["rate"],
            transfer=transfer["untargeted_success"]["rate"],
            bpda=bpda["untargeted_success"]["rate"],
            transfer_minus_through_sap=gap1,
            transfer_gap_required=need1,
            bpda_minus_transfer=gap2,
            bpda_gap_required=need2,
            bpda_adv_accuracy=bpda_acc,
            defended_clean_accuracy=clean_acc,
        )

    cross = _find(cells, f"m1-k{k}-multinomial-bpda-from-binomial")
    if cross and bpda:
        diff = abs(cross["untargeted_success"]["rate"] - bpda["untargeted_success"]["rate"])
        add(
            "scheme-invariance",
            "bpda crafted against binomial SAP and scored on multinomial SAP is within 5 points of the matched run",
            diff <= 0.05,
            cross=cross["untargeted_success"]["rate"],
            matched=bpda["untargeted_success"]["rate"],
            difference=diff,
        )
    return out


# -- drivers -----------------------------------------------------------------


def run_cells(lab: Lab, cells: list[Cell], dump_dir: Path | None = None) -> tuple[dict, dict]:
    """Run cells in id order; a failing cell is recorded and the run goes on.
    Returns ``(entries, seconds)`` keyed by cell id."""
    entries: dict = {}
    seconds: dict = {}
    for cell in sorted(cells, key=lambda c: c.cell_id):
        start = time.perf_counter()
        try:
            entries[cell.cell_id] = run_cell(lab, cell, dump_dir)
        except Exception as exc:  # recorded per cell, the grid continues
            log.exception("cell %s failed", cell.cell_id)
            entries[cell.cell_id] = {"cell": cell.to_dict(), "error": f"{type(exc).__name__}: {exc}"}
        seconds[cell.cell_id] = time.perf_counter() - start
        log.info("cell %s done in %.1fs", cell.cell_id, seconds[cell.cell_id])
    return entries, seconds


def assemble_report(lab: Lab, entries: dict, findings: list[dict] | None = None) -> dict:
    cfg = lab.config
    return {
        "tool": {"name": "saplab", "version": __version__},
        "config": cfg.to_dict(),
        "seeds": {"global": cfg.seed, **cfg.seeds},
        "attack_config": cfg.attack_config().to_dict(),
        "network": {
            "widths": list(lab.network.spec.widths),
            "train_accuracy": lab.meta.get("train_accuracy"),
            "test_accuracy": network.accuracy(lab.network, lab.x, lab.y),
        },
        "dataset": {"params": lab.dataset.params.to_dict(), "n_test": len(lab.y)},
        "cells": [entries[cid] for cid in sorted(entries)],
        "findings": findings or [],
    }


def reproduce_erratum(config: ExperimentConfig, out_dir=None) -> tuple[dict, dict]:
    """Run the full erratum grid. Returns ``(report, seconds_per_cell)``."""
    lab = build_lab(config)
    dump_dir = Path(out_dir) / "adversarial" if out_dir is not None else None
    entries, seconds = run_cells(lab, erratum_cells(config), dump_dir)
    ok = {cid: e for cid, e in entries.items() if "error" not in e}
    return assemble_report(lab, entries, evaluate_findings(ok, config)), seconds


def calibrate_epsilon(lab: Lab, grid=None, threshold: float = 0.95) -> tuple[float | None, dict]:
    """Smallest epsilon on ``grid`` at which undefended white-box PGD succeeds on
    more than ``threshold`` of the test points."""
    grid = grid if grid is not None else [round(0.01 * i, 2) for i in range(1, 31)]
    sweep = {}
    for eps in grid:
        cfg = lab.config.attack_config(epsilon=eps, step_size=None, oracle="vanilla", targeted=False)
        result = attacks.pgd(attacks.oracle_vanilla(lab.network), lab.x, lab.y, cfg, attacks.clean_judge(lab.network), lab.ids)
        sweep[eps] = float(np.mean(result.predictions != lab.y))
        if sweep[eps] > threshold:
            return eps, sweep
    return None, sweep


# -- report emission -----------------------------------------------------------


def canonical_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_rows(report: dict, seconds: dict | None = None) -> list[list]:
    rows = []
    for entry in report["cells"]:
        cell = entry["cell"]
        defense = cell.get("defense")
        oracle = "" if cell["attack"] == "none" else cell["attack"]
        failed = "error" in entry
        rows.append(
            [
                cell["cell_id"],
                "" if defense is None else defense["r_multiplier"],
                "" if defense is None else defense["scheme"],
                "" if defense is None else defense["passes"],
                oracle,
                cell["targeted"],
                "" if failed else entry["epsilon"],
                "" if failed else entry["clean_accuracy"]["rate"],
                "" if failed else entry["adv_accuracy"]["rate"],
                "" if failed else entry["success_rate"]["rate"],
                "" if failed else entry["success_rate"]["stderr"],
                "" if seconds is None or cell["cell_id"] not in seconds else f"{seconds[cell['cell_id']]:.3f}",
            ]
        )
    return rows


def emit_report(report: dict, out_dir, formats=("json", "csv"), seconds: dict | None = None) -> list[Path]:
    """Write ``report.json`` (canonical) and/or ``report.csv``; timings, when
    given, go to the CSV and to ``timings.json``."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if "json" in formats:
            path = out / "report.json"
            path.write_text(canonical_json(report))
            written.append(path)
        if "csv" in formats:
            path = out / "report.csv"
            with open(path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(CSV_COLUMNS)
                writer.writerows(csv_rows(report, seconds))
            written.append(path)
        if seconds is not None:
            path = out / "timings.json"
            path.write_text(json.dumps(seconds, sort_keys=True, indent=2) + "\n")
            written.append(path)
    except OSError as exc:
        raise OSError(f"could not write report to {out}: {exc}") from exc
    return written


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
