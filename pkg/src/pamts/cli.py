"""Command-line harness.

Subcommands: ingest, perturb, train, evaluate, sweep, ablate, certify,
verify-prop2, synth, report.  Experiment settings come from a flat
key = value config file (see README for the key list); --seed and --out
override the config's seeds and output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, certify, corpus
from .bench import ExperimentConfig, SynthSpec, emit_csv, emit_plot, read_csv
from .embed import EmbedderConfig, HashEmbedder
from .errors import ConfigurationError, PamtsError
from .model import ModelConfig, checkpoint_digest, init_model, load_checkpoint, save_checkpoint
from .perturb import STRATEGIES, PerturbationSpec, perturb_window, write_audit_log
from .rng import derive_seed
from .train import OptimizerConfig, evaluate, fit, stats_to_csv


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; blanks ignored."""
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path} line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _split_list(value: str) -> list[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def _parse_strategies(value: str):
    parts = _split_list(value)
    if all(":" in p for p in parts):
        pairs = tuple((name.strip(), float(w)) for name, w in (p.split(":", 1) for p in parts))
        return pairs
    unknown = [p for p in parts if p not in STRATEGIES]
    if unknown:
        raise ConfigurationError(f"unknown strategies {unknown}")
    return tuple((name, 1.0 / len(parts)) for name in parts)


def _bool(value: str) -> bool:
    if value.lower() in ("true", "yes", "1"):
        return True
    if value.lower() in ("false", "no", "0"):
        return False
    raise ConfigurationError(f"expected boolean, got {value!r}")


def config_from_mapping(m: dict[str, str]) -> ExperimentConfig:
    synth = None
    if _bool(m.get("synth", "false")):
        synth = SynthSpec(
            seed=int(m.get("synth_seed", "0")),
            n=int(m.get("synth_n", "600")),
            lookback=int(m.get("lookback", "8")),
            horizon=int(m.get("horizon", "6")),
            text_signal=float(m.get("synth_text_signal", "1.0")),
        )
    embed = EmbedderConfig(
        dim=int(m.get("embed_dim", "12")),
        seed=int(m.get("embed_seed", "0")),
        source=m.get("embed_source", "deterministic_hash"),
    )
    optimizer = OptimizerConfig(
        lr_model=float(m.get("lr_model", "0.001")),
        lr_per_sup=float(m.get("lr_per_sup", "0.01")),
        lr_cross_attn=float(m.get("lr_cross_attn", "0.01")),
        max_epochs=int(m.get("max_epochs", "50")),
        patience=int(m.get("patience", "20")),
        clip_norm=float(m.get("clip_norm", "5.0")),
        shuffle=_bool(m.get("shuffle", "false")),
    )
    split = tuple(float(x) for x in _split_list(m.get("split", "0.7, 0.1, 0.2")))
    if len(split) != 3:
        raise ConfigurationError(f"split needs three ratios, got {split}")
    kwargs = dict(
        name=m.get("name", "experiment"),
        bundle_path=m.get("bundle"),
        synth=synth,
        freq=m.get("freq", "monthly"),
        lookback=int(m.get("lookback", "8")),
        label_len=int(m.get("label_len", "4")),
        horizon=int(m.get("horizon", "6")),
        stride=int(m.get("stride", "1")),
        seeds=tuple(int(x) for x in _split_list(m.get("seeds", "0, 1, 2, 3, 4"))),
        variants=tuple(_split_list(m.get("variants", "full"))),
        split=split,
        embed=embed,
        forecaster=m.get("forecaster", "gru"),
        attn_dim=int(m.get("attn_dim", "16")),
        heads=int(m.get("heads", "8")),
        hidden=int(m.get("hidden", "64")),
        prior_weight=float(m.get("prior_weight", "0.5")),
        dropout=float(m.get("dropout", "0.1")),
        optimizer=optimizer,
        perturb_eval_only=_bool(m.get("perturb_eval_only", "false")),
        resample_each_epoch=_bool(m.get("resample_each_epoch", "false")),
        out_dir=m.get("out_dir"),
    )
    if "rhos" in m:
        kwargs["rhos"] = tuple(float(x) for x in _split_list(m["rhos"]))
    if "strategies" in m:
        kwargs["strategies"] = _parse_strategies(m["strategies"])
    return ExperimentConfig(**kwargs)


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigurationError("this command needs --config")
    config = config_from_mapping(parse_config_file(args.config))
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    if args.out:
        config = replace(config, out_dir=args.out)
    return config


def _out_dir(args, config: ExperimentConfig | None = None) -> Path:
    out = args.out or (config.out_dir if config else None) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit_reports(table, out: Path, prefix: str) -> None:
    emit_csv(table, out / f"{prefix}.csv")
    avg_only = bench.ReportTable(rows=table.avg_rows())
    avg_path = out / f"{prefix}_avg.csv"
    if avg_only.rows:
        import csv

        with avg_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset", "variant", "rho", "seed", "mse", "mae"])
            for row in avg_only.rows:
                writer.writerow([row.dataset, row.variant, row.rho, row.seed, repr(row.mse), repr(row.mae)])
    for metric in ("mse", "mae"):
        try:
            emit_plot(table, out / f"{prefix}_{metric}.svg", metric=metric)
        except PamtsError:
            pass  # nothing plottable (all rows failed)


def cmd_synth(args) -> int:
    spec = SynthSpec(seed=args.seed if args.seed is not None else 0)
    if args.config:
        config = config_from_mapping(parse_config_file(args.config))
        if config.synth is not None:
            spec = config.synth
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
    series = bench.synth_dataset(spec)
    out = Path(args.out or "synth_bundle.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.save_bundle(series, out)
    print(f"wrote {len(series)}-step synthetic bundle to {out}")
    return 0


def cmd_ingest(args) -> int:
    mapping = parse_config_file(args.config) if args.config else {}
    numeric = mapping.get("numeric")
    texts = mapping.get("texts")
    freq = mapping.get("freq", "monthly")
    if not numeric:
        raise ConfigurationError("ingest needs a config with a `numeric` CSV path")
    schema = corpus.ColumnSchema(target_column=mapping.get("target_column"))
    series = corpus.load_numerical(numeric, schema)
    events = corpus.load_text_events(texts) if texts else []
    aligned = corpus.align_texts(series, events, freq)
    out = Path(args.out or "bundle.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.save_bundle(aligned, out)
    print(f"wrote {len(aligned)}-step bundle ({aligned.channels} channels) to {out}")
    return 0


def cmd_perturb(args) -> int:
    config = _load_config(args)
    series = bench.load_series(config)
    rho = args.rho if args.rho is not None else config.rhos[0]
    seed = config.seeds[0]
    spec = PerturbationSpec(rho=rho, seed=seed, strategies=config.strategies)
    texts, records = perturb_window(list(series.texts), spec, window_index=0)
    out = _out_dir(args, config)
    perturbed = corpus.TextualNumericalSeries(
        dates=series.dates,
        values=series.values,
        texts=tuple(texts),
        freq=series.freq,
        columns=series.columns,
        target=series.target,
    )
    corpus.save_bundle(perturbed, out / "perturbed_bundle.json")
    write_audit_log(records, out / "perturbation_audit.jsonl")
    print(f"perturbed {len(records)} of {len(series)} steps (rho={rho}); audit in {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    series = bench.load_series(config)
    rho, seed = config.rhos[0], config.seeds[0]
    variant = config.variants[0]
    view = bench.build_cell_view(series, config, rho, seed)
    model = init_model(config.model_config(view.channels), seed)
    opt = replace(config.optimizer, seed=seed)
    model, stats = fit(model, view.train, view.val, opt, freq=config.freq, variant=variant)
    out = _out_dir(args, config)
    save_checkpoint(model, out / "checkpoint.json")
    stats_to_csv(stats, out / "training_log.csv")
    best = min(s.val_loss for s in stats)
    print(f"trained {len(stats)} epochs (variant={variant}, rho={rho}); best val loss {best:.6f}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    if not args.checkpoint:
        raise ConfigurationError("evaluate needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    series = bench.load_series(config)
    rho, seed = config.rhos[0], config.seeds[0]
    variant = config.variants[0]
    view = bench.build_cell_view(series, config, rho, seed)
    mse, mae = evaluate(model, view.test, variant=variant)
    print(f"dataset={config.name} variant={variant} rho={rho} seed={seed} mse={mse!r} mae={mae!r}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, config)
    config = replace(config, out_dir=str(out), variants=config.variants or bench.SWEEP_VARIANTS)
    table = bench.run_experiment(config)
    _emit_reports(table, out, "report")
    for row in table.rows:
        if row.failed:
            print(f"FAILED {row.variant} rho={row.rho} seed={row.seed}: {row.error}", file=sys.stderr)
    print(f"wrote report for {len(table.rows)} cells to {out}")
    return 1 if table.has_failures else 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, config)
    config = replace(config, out_dir=str(out))
    table = bench.ablation_suite(config)
    _emit_reports(table, out, "ablation")
    print(f"wrote ablation report ({len(table.rows)} cells) to {out}")
    return 1 if table.has_failures else 0


def cmd_certify(args) -> int:
    config = _load_config(args)
    series = bench.load_series(config)
    view = bench.build_cell_view(series, config, config.rhos[0], config.seeds[0])
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        provenance = {"checkpoint": str(args.checkpoint), "checkpoint_sha256": checkpoint_digest(args.checkpoint)}
    else:
        model = init_model(config.model_config(view.channels), config.seeds[0], projector_init="normal")
        provenance = {"checkpoint": None, "init_seed": config.seeds[0]}
    max_norm = max(float(np.linalg.norm(s.e)) for s in view.train + view.val + view.test)
    radius = 1.1 * max(max_norm, 1e-6)
    x_fixture = view.test[0].x
    cert = certify.certify_model(model, x_fixture, radius, samples=args.samples, seed=config.seeds[0], provenance=provenance)
    out = _out_dir(args, config)
    cert.save(out / "certificate.json")
    print(cert.to_json())
    print(f"wrote certificate to {out / 'certificate.json'}")
    return 0


def cmd_verify_prop2(args) -> int:
    seed = args.seed if args.seed is not None else 0
    nm = certify.make_signal_noise_model(dim=12, noise_dim=4, sigma=args.sigma, seed=seed)
    forecaster = certify.make_noise_sensitive_forecaster(nm, out_dim=3, seed=seed)
    report = certify.verify_prop2(forecaster, nm, phi="oracle", trials=args.trials, seed=seed)
    out = _out_dir(args)
    (out / "prop2_report.json").write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    bound = forecaster.lipschitz**2 * report.mean_eta_sq
    print(f"variance_raw={report.variance_raw!r} <= L_f^2 * E||eta||^2 = {bound!r}: {report.variance_raw <= bound}")
    return 0


def cmd_report(args) -> int:
    if not args.input:
        raise ConfigurationError("report needs --in <csv>")
    table = read_csv(args.input)
    out = _out_dir(args)
    _emit_reports(table, out, "report")
    print(f"re-emitted report ({len(table.rows)} cells) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pamts", description=__doc__)
    parser.add_argument("--config", help="flat key=value experiment config file")
    parser.add_argument("--seed", type=int, help="override the config's seed list with one seed")
    parser.add_argument("--out", help="output directory (or file for synth/ingest)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="write a synthetic benchmark bundle")
    sub.add_parser("ingest", help="align a numeric CSV with JSONL texts into a bundle")
    p = sub.add_parser("perturb", help="perturb a whole series and write the audit log")
    p.add_argument("--rho", type=float, help="perturbation ratio (default: first of config rhos)")
    sub.add_parser("train", help="train one (rho, seed, variant) cell; write checkpoint")
    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", help="checkpoint JSON path")
    sub.add_parser("sweep", help="full (rho x seed x variant) grid with reports")
    sub.add_parser("ablate", help="full / no_ppm / no_attn suite on shared views")
    p = sub.add_parser("certify", help="emit a Lipschitz certificate JSON")
    p.add_argument("--checkpoint", help="certify a trained checkpoint instead of a fresh model")
    p.add_argument("--samples", type=int, default=1000, help="sampling budget per estimate")
    p = sub.add_parser("verify-prop2", help="denoising error-reduction Monte Carlo check")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--sigma", type=float, default=1.0)
    p = sub.add_parser("report", help="recompute averages/plots from an emitted CSV")
    p.add_argument("--in", dest="input", help="previously emitted report CSV")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "perturb": cmd_perturb,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "certify": cmd_certify,
    "verify-prop2": cmd_verify_prop2,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except PamtsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
