"""Command-line entry point: ``phsa {gen,train,eval,analyze,verify,bench}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(including training divergence), 3 verification failure.  Output paths
default to subdirectories of ``$PHSA_OUT`` (``./runs`` when unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, bench, io, verify
from .attention import Drop, Variant
from .config import DataConfig, RunConfig, load_run_config, resolve_encoder
from .encoder import ConfigError
from .task import (
    Classifier,
    DivergenceError,
    evaluate,
    group_confusion_ratio,
    init_classifier,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("phsa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def out_root() -> Path:
    return Path(os.environ.get("PHSA_OUT", "runs"))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _override(obj, **values):
    values = {k: v for k, v in values.items() if v is not None}
    return replace(obj, **values) if values else obj


def _data_config(args) -> DataConfig:
    base = load_run_config(args.config).data
    return _override(base, n_train=args.n_train, n_dev=args.n_dev, t_min=args.t_min, t_max=args.t_max,
                     d_in=args.d_in, seed=args.seed, noise_scale=args.noise, speaker_scale=args.speaker,
                     mean_scale=args.mean_scale)


def _read_data_dir(path: Path) -> tuple[DataConfig, dict]:
    meta = path / "config.json"
    if not meta.exists():
        raise ConfigError(f"{path} is not a dataset directory (no config.json); run `phsa gen` first")
    data_cfg = RunConfig.from_dict(json.loads(meta.read_text())).data
    return data_cfg, {s: path / f"{s}.csv" for s in ("train", "dev")}


def _load_split(data_dir: Path, split: str):
    data_cfg, files = _read_data_dir(data_dir)
    if split not in files:
        raise ConfigError(f"unknown split {split!r}")
    return data_cfg, io.read_dataset(files[split])


def load_model(path: Path) -> tuple[Classifier, RunConfig, io.Checkpoint]:
    ckpt = io.load_checkpoint(path)
    run = RunConfig.from_dict(ckpt.run_config)
    inv = run.data.inventory()
    model = init_classifier(run.encoder, run.data.d_in, inv.num_classes)
    model.load_values(ckpt.tensors)
    return model, run, ckpt


def _model_checkpoint(model: Classifier, run: RunConfig, step: int, epoch: int) -> io.Checkpoint:
    return io.Checkpoint(run.to_dict(), model.snapshot(), step, epoch)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    data_cfg = _data_config(args)
    out = Path(args.out) if args.out else out_root() / "data"
    targets = [out / "train.csv", out / "dev.csv", out / "config.json"]
    existing = [str(p) for p in targets if p.exists()]
    if existing and not args.force:
        raise ConfigError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    train_set, dev_set = data_cfg.splits()
    out.mkdir(parents=True, exist_ok=True)
    io.write_dataset(targets[0], train_set)
    io.write_dataset(targets[1], dev_set)
    targets[2].write_text(RunConfig(data=data_cfg).dumps())
    print(f"wrote {len(train_set)} train / {len(dev_set)} dev utterances to {out}")
    return EXIT_OK


def _run_config_for_train(args) -> RunConfig:
    run = load_run_config(args.config)
    data_cfg, _ = _read_data_dir(Path(args.data))
    enc = _override(run.encoder, num_layers=args.layers, num_heads=args.heads, d_model=args.d_model,
                    d_h=args.d_h, ffn_dim=args.ffn_dim, seed=args.model_seed)
    if args.no_pe:
        enc = replace(enc, use_abs_pe=False)
    variant = Variant(args.variant or run.variant)
    enc = resolve_encoder(variant, enc, args.phsa_layers, args.upper_variant)
    enc.validate()
    tr = _override(run.train, learning_rate=args.lr, weight_decay=args.weight_decay,
                   batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    return RunConfig(variant=variant, data=data_cfg, encoder=enc, train=tr)


def cmd_train(args) -> int:
    run = _run_config_for_train(args)
    _, files = _read_data_dir(Path(args.data))
    train_set = io.read_dataset(files["train"])
    dev_set = io.read_dataset(files["dev"])
    out = Path(args.out) if args.out else out_root() / "train"
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(run.dumps())
    ckpt_path = out / "checkpoint.ckpt"

    def on_epoch(epoch, model, history, opt):
        io.save_checkpoint(ckpt_path, _model_checkpoint(model, run, opt.step_count, epoch))
        write_history(out / "history.csv", history)

    num_classes = run.data.inventory().num_classes
    model = init_classifier(run.encoder, run.data.d_in, num_classes)
    io.save_checkpoint(ckpt_path, _model_checkpoint(model, run, 0, 0))
    model, history = train(run.train, run.encoder, train_set, num_classes, model=model, on_epoch=on_epoch)
    write_history(out / "history.csv", history)
    ev = evaluate(model, dev_set)
    print(f"variant {run.variant.value}, phsa layers {run.encoder.num_phsa_layers}/{run.encoder.num_layers}: "
          f"train loss {history[0].loss:.4f} -> {history[-1].loss:.4f}, dev accuracy {ev.accuracy:.4f}")
    return EXIT_OK


def write_history(path: Path, history) -> None:
    io.write_table(path, "history", ("epoch", "loss", "accuracy"),
                   [(r.epoch, r.loss, r.accuracy) for r in history])


def cmd_eval(args) -> int:
    model, run, _ = load_model(Path(args.checkpoint))
    _, data = _load_split(Path(args.data), args.split)
    ev = evaluate(model, data)
    inv = run.data.inventory()
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    ratio = group_confusion_ratio(ev.confusion, inv)
    io.write_table(out / f"eval_{args.split}.csv", "eval", ("metric", "value"),
                   [("accuracy", ev.accuracy), ("loss", ev.loss), ("frames", ev.num_frames),
                    ("group_confusion_ratio", ratio)])
    io.write_table(out / f"confusion_{args.split}.csv", "confusion", ("true_class", "pred_class", "count"),
                   [(inv.class_names[i], inv.class_names[j], int(ev.confusion[i, j]))
                    for i in range(inv.num_classes) for j in range(inv.num_classes)])
    print(f"{args.split}: accuracy {ev.accuracy:.4f}, loss {ev.loss:.4f} over {ev.num_frames} frames")
    return EXIT_OK


REPORT_COLUMNS = ("layer", "head", "metric", "mean", "std")


def _entropy_file(path: Path, report: analysis.EntropyReport) -> None:
    io.write_table(path, "entropy", REPORT_COLUMNS, report.rows(),
                   notes=[f"ablation={report.tag}", "entropy in nats (natural log)",
                          "entropy_rows std is across query rows; entropy_heads std is across head means"])


def cmd_analyze(args) -> int:
    model, run, _ = load_model(Path(args.checkpoint))
    cfg = run.encoder
    _, data = _load_split(Path(args.data), args.split)
    inv = run.data.inventory()
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    which = args.which

    if which == "slopes":
        report = analysis.slope_report(model, cfg)
        rows = []
        for l, h, a_s, a_c in report.rows:
            rows += [(l, h, "alpha_s", a_s, 0.0), (l, h, "alpha_c", a_c, 0.0)]
        io.write_table(out / "slopes.csv", "slopes", REPORT_COLUMNS, rows)
        print(f"{len(report.rows)} phonetic heads; alpha_s in [{report.alpha_s.min():.3f}, "
              f"{report.alpha_s.max():.3f}], alpha_c in [{report.alpha_c.min():.3f}, {report.alpha_c.max():.3f}]")
        return EXIT_OK

    if which == "ablation":
        if cfg.num_phsa_layers == 0:
            raise ConfigError("ablation needs a checkpoint with phonetic attention layers")
        phsa_layers = list(range(cfg.num_phsa_layers))
        rows, entropies = [], {}
        for tag, drop, s, c in (("full", None, 1, 1), ("similarity-only", Drop.CONTENT, 1, 0),
                                ("content-only", Drop.SIMILARITY, 0, 1)):
            maps, _ = analysis.collect_maps(model, data, drop=drop)
            rep = analysis.attention_entropy(maps, tag=tag, layers=phsa_layers)
            _entropy_file(out / f"entropy_{tag}.csv", rep)
            ev = evaluate(model, data, drop=drop)
            entropies[tag] = rep.mean
            within = analysis.max_within_map_std(maps, phsa_layers)
            rows.append((tag, s, c, rep.mean, rep.std_rows, rep.std_heads, within, ev.accuracy, ev.loss))
        lower = entropies["similarity-only"] < entropies["content-only"]
        io.write_table(out / "ablation.csv", "ablation",
                       ("ablation", "S", "C", "entropy_mean", "entropy_std_rows", "entropy_std_heads",
                        "max_within_map_std", "accuracy", "loss"), rows,
                       notes=[f"similarity_only_entropy_below_content_only={str(lower).lower()}",
                              f"entropy in nats over phonetic layers {phsa_layers}"])
        for r in rows:
            print(f"{r[0]:>16}: entropy {r[3]:.3f} +- {r[4]:.3f}, accuracy {r[7]:.4f}")
        print(f"entropy(similarity-only) < entropy(content-only): {lower}")
        return EXIT_OK

    maps, labels = analysis.collect_maps(model, data)
    if which == "entropy":
        rep = analysis.attention_entropy(maps, tag="full")
        _entropy_file(out / "entropy.csv", rep)
        print(f"mean entropy {rep.mean:.4f} nats over {len(rep.heads)} heads")
        return EXIT_OK

    if which == "maps":
        if not 0 <= args.utt < len(maps):
            raise ConfigError(f"--utt must lie in [0, {len(maps) - 1}]")
        target = out / "maps"
        target.mkdir(exist_ok=True)
        for l, stack in enumerate(maps[args.utt]):
            for h, a in enumerate(stack):
                io.write_attention_map(target / f"L{l}_H{h}.csv", l, h, a)
        print(f"wrote {sum(len(s) for s in maps[args.utt])} maps to {target}")
        return EXIT_OK

    # par
    n_heads = cfg.num_heads
    selected = [(l, h) for l in range(cfg.num_layers) for h in range(n_heads)
                if (args.layer is None or l == args.layer) and (args.head is None or h == args.head)]
    if not selected:
        raise ConfigError("no (layer, head) matches --layer/--head")
    sym_rows = []
    for l, h in selected:
        par = analysis.compute_par([m[l][h] for m in maps], labels, inv.num_classes,
                                   inv.class_names, exclude_silence=args.exclude_silence)
        rows = [(par.class_names[i], par.class_names[j], par.values[i, j], int(par.support[i]))
                for i in range(inv.num_classes) for j in range(inv.num_classes)]
        io.write_table(out / f"par_L{l}_H{h}.csv", "par", ("class_i", "class_j", "value", "support_i"), rows)
        sym_rows.append((l, h, "par_symmetry", analysis.par_symmetry_score(par), 0.0))
    io.write_table(out / "par_symmetry.csv", "par-symmetry", REPORT_COLUMNS, sym_rows)
    print(f"wrote PAR for {len(selected)} heads to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify.run_all(quick=args.quick)
    for r in report.results:
        print(r.line())
    print(f"max gradient error: {report.max_grad_error:.3e}")
    print("verify: PASS" if report.passed else "verify: FAIL")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_bench(args) -> int:
    run = load_run_config(args.config)
    cfg = _override(run.encoder, num_heads=args.heads, d_model=args.d_model, d_h=args.d_h)
    cfg.validate()
    rows = bench.run_bench(cfg, lengths=args.T, iters=args.iters, warmup=args.warmup, seed=args.seed,
                           threads=args.threads or None)
    parity = bench.parity_table(cfg)
    print(",".join(bench.BENCH_COLUMNS))
    for r in rows:
        print(",".join(str(v) for v in r.as_tuple()))
    totals = {k: sum(v.values()) for k, v in parity.items()}
    print(f"attention parameters: conventional SA {totals['sa_conventional']}, "
          f"SA without b_K {totals['sa_m2']}, phSA {totals['phsa']}")
    added = sum(parity["phsa"].get(k, 0) for k in ("W_C", "c", "alpha_s", "alpha_c"))
    removed = sum(parity["sa_conventional"].get(k, 0) for k in ("b_Q", "b_K"))
    print(f"phSA - SA = +{added} (W_C, c, alpha_s, alpha_c) - {removed} (b_Q, b_K) = "
          f"{totals['phsa'] - totals['sa_conventional']}")
    for T in args.T:
        sa = next(r for r in rows if r.T == T and r.layer == "sa+abs_pe" and r.mode == "forward")
        ph = next(r for r in rows if r.T == T and r.layer == "phsa" and r.mode == "forward")
        print(f"T={T}: phSA forward / SA forward = {ph.median_ms / sa.median_ms:.3f}")
    if args.out:
        io.write_table(args.out, "bench", bench.BENCH_COLUMNS, [r.as_tuple() for r in rows])
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phsa", description="Phonetic self-attention desk-scale toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate the synthetic phoneme dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-dev", type=int)
    g.add_argument("--t-min", type=int)
    g.add_argument("--t-max", type=int)
    g.add_argument("--d-in", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--speaker", type=float)
    g.add_argument("--mean-scale", type=float)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a frame classifier")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--phsa-layers", type=int)
    t.add_argument("--upper-variant", choices=[v.value for v in Variant])
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--d-model", type=int)
    t.add_argument("--d-h", type=int)
    t.add_argument("--ffn-dim", type=int)
    t.add_argument("--no-pe", action="store_true")
    t.add_argument("--model-seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="frame accuracy and confusion matrix")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="dev")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="PAR, entropy, PReLU slopes, term ablation, map export")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--which", required=True, choices=["par", "entropy", "slopes", "ablation", "maps"])
    a.add_argument("--split", default="dev")
    a.add_argument("--out")
    a.add_argument("--layer", type=int)
    a.add_argument("--head", type=int)
    a.add_argument("--exclude-silence", action="store_true")
    a.add_argument("--utt", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="run the numerical property suite")
    v.add_argument("--quick", action="store_true")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="per-layer timing of SA+PE vs phSA")
    b.add_argument("--config")
    b.add_argument("--T", type=int, nargs="+", default=[64, 256, 1024])
    b.add_argument("--iters", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--heads", type=int)
    b.add_argument("--d-model", type=int)
    b.add_argument("--d-h", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threads", type=int, default=1, help="BLAS threads (0 = library default)")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"phsa: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, io.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"phsa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"phsa: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ArithmeticError, MemoryError) as exc:
        print(f"phsa: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
