"""Command-line entry point: ``saplab <command> CONFIG [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from saplab import data, harness, network
from saplab.errors import SapLabError
from saplab.sap import SapConfig


def _load_config(args) -> harness.ExperimentConfig:
    config = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _print_findings(report: dict) -> bool:
    ok = True
    for f in report.get("findings", []):
        status = "PASS" if f["passed"] else "FAIL"
        ok &= f["passed"]
        print(f"{status}  {f['id']}: {f['description']}")
        for key, value in f["values"].items():
            print(f"        {key} = {value:.4g}" if isinstance(value, float) else f"        {key} = {value}")
    return ok


def _emit(report: dict, out: Path, seconds: dict | None) -> None:
    for path in harness.emit_report(report, out, seconds=seconds):
        print(f"wrote {path}")


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    path = data.save_dataset(harness.build_dataset(config), Path(args.out) / "dataset.sapd")
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset = harness.build_dataset(config)
    net, meta = harness.train_network(config, dataset)
    out = Path(args.out)
    data.save_dataset(dataset, out / "dataset.sapd")
    path = network.save_checkpoint(net, out / "model.json", meta)
    print(f"train accuracy {meta['train_accuracy']:.4f}, test accuracy {meta['test_accuracy']:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    lab = harness.build_lab(config)
    seed = config.seeds["sap"]
    if config.defenses:
        defenses = [SapConfig.from_dict({**d, "seed": seed}) for d in config.defenses]
    else:
        defenses = [
            config.sap(mult, scheme, passes)
            for scheme in ("multinomial", "binomial")
            for mult, passes in ((1.0, config.reference_passes), (1.0, 1), (2.0, 1))
        ]
    cells = [harness.Cell("e00-undefended", None)]
    cells += [
        harness.Cell(f"e{i + 1:02d}-m{d.r_multiplier:g}-k{d.passes}-{d.scheme}", d) for i, d in enumerate(defenses)
    ]
    entries, seconds = harness.run_cells(lab, cells)
    report = harness.assemble_report(lab, entries)
    for entry in report["cells"]:
        if "error" not in entry:
            print(f"{entry['cell']['cell_id']:<36} clean accuracy {entry['clean_accuracy']['rate']:.4f}")
    _emit(report, Path(args.out), seconds)
    return 0


def cmd_attack(args) -> int:
    config = _load_config(args)
    lab = harness.build_lab(config)
    seed = config.seeds["sap"]
    if config.cells:
        cells = [harness.Cell.from_dict(c, seed) for c in config.cells]
    else:
        ref = config.sap(1.0, "multinomial", config.reference_passes)
        cells = [
            harness.Cell(f"a{i:02d}-{attack}", ref, attack)
            for i, attack in enumerate(("through_sap", "transfer", "bpda"))
        ]
    out = Path(args.out)
    entries, seconds = harness.run_cells(lab, cells, out / "adversarial")
    report = harness.assemble_report(lab, entries)
    for entry in report["cells"]:
        if "error" in entry:
            print(f"{entry['cell']['cell_id']:<36} ERROR {entry['error']}")
        else:
            print(
                f"{entry['cell']['cell_id']:<36} success {entry['success_rate']['rate']:.4f}"
                f" +/- {entry['success_rate']['stderr']:.4f}  adv accuracy {entry['adv_accuracy']['rate']:.4f}"
            )
    _emit(report, out, seconds)
    return 0


def cmd_reproduce(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    report, seconds = harness.reproduce_erratum(config, out)
    ok = _print_findings(report)
    _emit(report, out, seconds)
    return 0 if ok or not args.strict else 1


def cmd_report(args) -> int:
    src = Path(args.config)
    report = harness.load_report(src)
    timings = src.with_name("timings.json")
    seconds = json.loads(timings.read_text()) if timings.exists() else None
    _print_findings(report)
    _emit(report, Path(args.out), seconds)
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset"),
    "train": (cmd_train, "train the undefended network and write a checkpoint"),
    "eval": (cmd_eval, "clean accuracy of the undefended and SAP-defended models"),
    "attack": (cmd_attack, "run attack cells and dump adversarial examples"),
    "reproduce-erratum": (cmd_reproduce, "run the full erratum grid and check the findings"),
    "report": (cmd_report, "re-emit a report JSON as canonical JSON and CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saplab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per cell")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "report":
            p.add_argument("config", help="report.json to re-emit")
        else:
            p.add_argument("config", nargs="?", help="experiment config JSON (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the global seed (unused by report)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if name == "reproduce-erratum":
            p.add_argument("--strict", action="store_true", help="exit 1 if any finding fails")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (SapLabError, OSError, json.JSONDecodeError) as exc:
        print(f"saplab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
