"""``ssmd`` command line: one entry point, one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure. Every
run writes a JSON run manifest (``--manifest``, default next to the first
output file, else ``ssmd-<command>.manifest.json`` in the working directory).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .convsim import SimConfig, load_conversation, read_manifest, save_conversation, simulate_conversation, write_manifest
from .model import ModelConfig, coerce_field
from .numerics import checkpoint

log = logging.getLogger("ssmd")

SECTIONS = ("model", "train", "sim", "run")


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config and manifests


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict[str, str]]:
    cfg: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path:
        if not Path(path).exists():
            raise UsageError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        text = Path(path).read_text()
        if not any(line.strip().startswith("[") for line in text.splitlines()):
            text = "[model]\n" + text  # a bare key=value file configures the model
        try:
            cp.read_string(text, source=path)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse {path}: {exc}") from exc
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise UsageError(f"unknown config section [{sec}]; expected one of {SECTIONS}")
            cfg[sec].update(cp[sec])
    for item in overrides:
        key, eq, value = item.partition("=")
        sec, dot, name = key.partition(".")
        if not eq or not dot or sec not in SECTIONS:
            raise UsageError(f"--set expects section.key=value with section in {SECTIONS}, got {item!r}")
        cfg[sec][name.strip()] = value.strip()
    return cfg


def resolve_seed(flag: int | None, cfg: dict[str, dict[str, str]]) -> int:
    """Flag beats the SSMD_SEED environment variable, which beats the config file."""
    if flag is not None:
        return flag
    env = os.environ.get("SSMD_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"SSMD_SEED must be an integer, got {env!r}") from exc
    try:
        return int(cfg["run"].get("seed", 0))
    except ValueError as exc:
        raise UsageError(f"[run] seed must be an integer: {exc}") from exc


def dataclass_from(cls, values: dict[str, str], **fixed):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in values.items():
        if k not in known:
            raise UsageError(f"unknown {cls.__name__} key {k!r}")
        try:
            kw[k] = coerce_field(k, v, known[k].default)
        except ValueError as exc:
            raise UsageError(f"{cls.__name__}.{k}: {exc}") from exc
    kw.update(fixed)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def version_string() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: str | None
    seed: int
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    version: str = ""
    wall_time: float = 0.0
    started: str = ""
    status: str = "ok"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from exc


def _speaker_range(text: str) -> tuple[int, int]:
    lo, _, hi = str(text).partition("-")
    try:
        a, b = int(lo), int(hi or lo)
    except ValueError as exc:
        raise UsageError(f"--speakers expects N or LO-HI, got {text!r}") from exc
    if a > b:
        raise UsageError("--speakers range is reversed")
    return a, b


def _corpus(path: str):
    root = Path(path).parent
    return [load_conversation(e, root) for e in read_manifest(path)]


def _model_config(cfg, seed, **extra) -> ModelConfig:
    values = dict(cfg["model"])
    values.setdefault("seed", str(seed))
    values.update({k: str(v) for k, v in extra.items()})
    try:
        return ModelConfig.from_dict(values)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def _recordings(sims, masks_dir: str | None):
    from .pipeline import Recording, oracle_recording

    if masks_dir is None:
        return [oracle_recording(s) for s in sims]
    recs = []
    for s in sims:
        c = s.conversation
        mpath = Path(masks_dir) / f"{c.id}.mask.ssmd"
        if not mpath.exists():
            raise FileNotFoundError(f"no init mask for {c.id} under {masks_dir}")
        t = checkpoint.load(mpath)
        recs.append(Recording(c.id, s.features.matrix, t["mask"], t["ivecs"], None, c.segment_set()[c.id],
                              [f"{c.id}_c{i}" for i in range(t["mask"].shape[0])], c.hop))
    return recs


# ---------------------------------------------------------------------------
# subcommands; each returns (inputs, outputs) for the manifest


def cmd_simulate(a, cfg, seed):
    sim_cfg = dataclass_from(SimConfig, cfg["sim"], **({"mode": a.mode} if a.mode else {}))
    lo, hi = _speaker_range(a.speakers)
    out = Path(a.out)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(a.count):
        n = lo if lo == hi else int(rng.integers(lo, hi + 1))
        sub = seed if a.count == 1 else int(rng.integers(2**31))
        overlap = 0.0 if n == 1 else a.overlap
        sim = simulate_conversation(n, a.duration, overlap, sub, sim_cfg, conv_id=f"{a.prefix}{i:04d}")
        entries.append(save_conversation(sim, out))
        print(f"{sim.conversation.id}\tspeakers={n}\tframes={sim.labels.shape[1]}\t"
              f"overlap={sim.conversation.overlap_realized:.3f}")
    manifest = out / "manifest.jsonl"
    write_manifest(entries, manifest)
    files = [str(out), str(manifest)] + [str(out / e[k]) for e in entries for k in ("features", "rttm")]
    return [], files


def cmd_build_memory(a, cfg, seed):
    from .pipeline import corpus_memory, save_memory

    mcfg = _model_config(cfg, seed)
    sims = _corpus(a.corpus)
    bank = corpus_memory(sims, a.rows or mcfg.memory_rows, a.dim or mcfg.d_memory, seed=seed, source=a.corpus)
    save_memory(a.out, bank)
    print(f"memory bank: {bank.K} rows x {bank.dim} dims from {len(sims)} conversations -> {a.out}")
    return [a.corpus], [a.out, a.out + ".json"]


def cmd_init_cluster(a, cfg, seed):
    from .pipeline import cluster_mask, mask_ivectors
    from .scoring import compute_der, segments_from_activity, write_rttm

    sims = _corpus(a.corpus)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    files, ref, hyp = [str(out)], {}, {}
    for s in sims:
        c = s.conversation
        if a.n_speakers == "auto":
            n = None
        elif a.n_speakers == "oracle":
            n = c.n_speakers
        else:
            n = int(a.n_speakers)
        mask = cluster_mask(s.features.matrix, c.hop, n, seed)
        iv = mask_ivectors(s.features.matrix, mask, s.ivecs.shape[1])
        mpath = out / f"{c.id}.mask.ssmd"
        checkpoint.save(mpath, {"mask": mask, "ivecs": iv})
        segs = segments_from_activity(mask, c.hop, [f"{c.id}_c{i}" for i in range(mask.shape[0])])
        rpath = out / f"{c.id}.rttm"
        rpath.write_text(write_rttm({c.id: segs}))
        ref[c.id], hyp[c.id] = c.segment_set()[c.id], segs
        files += [str(mpath), str(rpath)]
        print(f"{c.id}\tclusters={mask.shape[0]}\treference={c.n_speakers}")
    print(f"clustering DER (collar 0.25): {compute_der(ref, hyp, collar=0.25).der:.2f}")
    return [a.corpus], files


def cmd_train(a, cfg, seed):
    from .pipeline import corpus_chunks, load_memory, load_model, save_model
    from .training import LossCurve, TrainConfig, staged_finetune, train

    tcfg = dataclass_from(TrainConfig, cfg["train"], seed=seed)
    if a.init:
        model = load_model(a.init)
    else:
        from .model import build_model

        model = build_model(_model_config(cfg, seed))
    inputs = [a.corpus] + [p for p in (a.init, a.memory) if p]
    if a.memory:
        model.memory.set(load_memory(a.memory).bank)
    elif not a.init:
        raise UsageError("train needs --memory (or --init with a model that already carries one)")
    chunks = corpus_chunks(_recordings(_corpus(a.corpus), None), model.config)
    curve = LossCurve()
    if a.staged:
        lr = a.lr if a.lr is not None else tcfg.lr_finetune
        curve = staged_finetune(model, chunks, tcfg, curve=curve, lr=lr)
    else:
        lr = a.lr if a.lr is not None else tcfg.lr_pretrain
        epochs = a.epochs if a.epochs is not None else tcfg.epochs
        curve, _ = train(model, chunks, epochs, lr, tcfg.batch_size, seed, curve=curve)
    save_model(a.out, model, {"train": dataclasses.asdict(tcfg), "lr": lr, "staged": bool(a.staged)})
    outputs = [a.out, a.out + ".json"]
    if a.curve:
        curve.save(a.curve)
        outputs.append(a.curve)
    first, last = curve.rows[0][2] if curve.rows else float("nan"), curve.rows[-1][2] if curve.rows else float("nan")
    print(f"{len(curve.rows)} steps, loss {first:.4f} -> {last:.4f}; model -> {a.out}")
    return inputs, outputs


def cmd_transfer_init(a, cfg, seed):
    from .pipeline import load_model, save_model
    from .training import transfer_model

    dense = load_model(a.pretrained)
    if dense.config.ssmoe_layers:
        raise UsageError("--pretrained must be a model without SS-MoE layers")
    extra = {"n_experts": a.experts, "slots_per_expert": a.slots}
    target = dense.config.with_moe(tuple(_ints(a.layers)), **extra)
    model = transfer_model(dense, target)
    save_model(a.out, model, {"transferred_from": a.pretrained})
    print(f"SS-MoE layers {target.ssmoe_layers} with {a.experts} experts x {a.slots} slots: "
          f"{dense.num_parameters()} -> {model.num_parameters()} parameters")
    return [a.pretrained], [a.out, a.out + ".json"]


def cmd_infer(a, cfg, seed):
    from .pipeline import diarize, load_model
    from .scoring import write_rttm

    model = load_model(a.model)
    recs = _recordings(_corpus(a.corpus), a.masks)
    results = diarize(model, recs, threshold=a.threshold, median_width=a.median)
    Path(a.out).write_text(write_rttm({k: r.segments() for k, r in results.items()}))
    print(f"{len(results)} recordings -> {a.out}")
    return [a.model, a.corpus] + ([a.masks] if a.masks else []), [a.out]


def cmd_score(a, cfg, seed):
    from .scoring import compute_der, compute_jer, parse_rttm

    ref = parse_rttm(Path(a.ref).read_text())
    hyp = parse_rttm(Path(a.hyp).read_text())
    report = compute_der(ref, hyp, collar=a.collar)
    print(report.table())
    print(f"DER {report.der:.2f}")
    if a.jer:
        print(f"JER {compute_jer(ref, hyp, collar=a.collar):.2f}")
    outputs = []
    if a.csv:
        Path(a.csv).write_text(report.csv())
        outputs.append(a.csv)
    return [a.ref, a.hyp], outputs


def cmd_routing_bench(a, cfg, seed):
    from .diagnostics import bench_csv, routing_bench

    rows = routing_bench(a.m, a.d, _ints(a.experts), _ints(a.slots), repeats=a.repeats, seed=seed,
                         timed=not a.no_timing)
    text = bench_csv(rows)
    sys.stdout.write(text)
    if a.out:
        Path(a.out).write_text(text)
        return [], [a.out]
    return [], []


def cmd_gradcheck(a, cfg, seed):
    from .diagnostics import GRAD_TOLERANCE, layer_gradchecks

    results = layer_gradchecks(seed=seed, max_coords=a.max_coords)
    bad = []
    for name, err in results.items():
        ok = err < GRAD_TOLERANCE
        print(f"{name:<18}{err:.3e}\t{'PASS' if ok else 'FAIL'}")
        if not ok:
            bad.append(name)
    if bad:
        raise RuntimeError(f"gradient check failed for {', '.join(bad)}")
    return [], []


def cmd_report(a, cfg, seed):
    from .report import report_curves

    labels = a.labels.split(",") if a.labels else None
    report_curves(a.csv, a.out, labels, a.title)
    print(f"{len(a.csv)} series -> {a.out}")
    return list(a.csv), [a.out]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [model] [train] [sim] [run] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="run seed; overrides SSMD_SEED and the config file")
    common.add_argument("--manifest", help="where to write the run manifest JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ssmd", description="Desk-scale neural speaker diarization with shared-and-soft MoE layers.")
    p.add_argument("--version", action="version", version=f"ssmd {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="generate synthetic conversations")
    s.add_argument("--out", default="sim", help="output directory (default: ./sim)")
    s.add_argument("--speakers", default="2-4", help="speaker count N or range LO-HI")
    s.add_argument("--duration", type=float, default=60.0, help="seconds per conversation")
    s.add_argument("--overlap", type=float, default=0.2, help="target overlap ratio")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--prefix", default="conv")
    s.add_argument("--mode", choices=("features", "waveform"))
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("build-memory", parents=[common], help="k-means memory bank from a corpus")
    s.add_argument("--corpus", required=True, help="manifest.jsonl from simulate")
    s.add_argument("--out", required=True)
    s.add_argument("--rows", type=int, help="K (default: model memory_rows)")
    s.add_argument("--dim", type=int, help="row width (default: model d_memory)")
    s.set_defaults(func=cmd_build_memory)

    s = sub.add_parser("init-cluster", parents=[common], help="spectral-clustering init masks")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="directory for <id>.mask.ssmd and <id>.rttm")
    s.add_argument("--n-speakers", default="auto", help="auto (eigengap), oracle, or an integer")
    s.set_defaults(func=cmd_init_cluster)

    s = sub.add_parser("train", parents=[common], help="train on a corpus with oracle init masks")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="model checkpoint path")
    s.add_argument("--memory", help="memory bank from build-memory")
    s.add_argument("--init", help="start from this model checkpoint")
    s.add_argument("--staged", action="store_true", help="two-stage SS-MoE fine-tuning schedule")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--curve", help="write the loss curve CSV here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transfer-init", parents=[common], help="initialise an SS-MoE model from a dense one")
    s.add_argument("--pretrained", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--layers", default="4,5,6", help="1-based decoder blocks that get SS-MoE")
    s.add_argument("--experts", type=int, default=6)
    s.add_argument("--slots", type=int, default=4, help="slots per expert")
    s.set_defaults(func=cmd_transfer_init)

    s = sub.add_parser("infer", parents=[common], help="diarize a corpus to RTTM")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="hypothesis RTTM")
    s.add_argument("--masks", help="directory from init-cluster (default: oracle masks)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--median", type=int, default=11, help="median filter width in frames")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("score", parents=[common], help="DER (and JER) between two RTTM files")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--collar", type=float, default=0.0)
    s.add_argument("--jer", action="store_true")
    s.add_argument("--csv", help="write the per-recording table as CSV")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("routing-bench", parents=[common], help="Soft-MoE MACs and latency per (n, p)")
    s.add_argument("--m", type=int, default=128, help="tokens")
    s.add_argument("--d", type=int, default=64, help="token width")
    s.add_argument("--experts", default="2,4,6,8")
    s.add_argument("--slots", default="4", help="slots per expert (list)")
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--no-timing", action="store_true", help="analytic MACs only")
    s.add_argument("--out", help="also write the CSV here")
    s.set_defaults(func=cmd_routing_bench)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer")
    s.add_argument("--max-coords", type=int, default=12)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", parents=[common], help="SVG plot from loss-curve or DER CSVs")
    s.add_argument("csv", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--labels", help="comma-separated series labels")
    s.add_argument("--title", default="")
    s.set_defaults(func=cmd_report)
    return p


def _manifest_path(a, outputs: list[str]) -> Path:
    if a.manifest:
        return Path(a.manifest)
    if outputs:
        first = Path(outputs[0])
        return first.parent / f"{first.name}.manifest.json" if not first.is_dir() else first / "run.manifest.json"
    return Path(f"ssmd-{a.command}.manifest.json")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(name)s: %(message)s")
    t0 = time.time()
    started = time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(t0))
    try:
        cfg = load_config(a.config, a.set)
        seed = resolve_seed(a.seed, cfg)
        inputs, outputs = a.func(a, cfg, seed)
    except UsageError as exc:
        print(f"ssmd {a.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports every failure the same way
        log.debug("failure", exc_info=True)
        print(f"ssmd {a.command}: error: {exc}", file=sys.stderr)
        return 1
    manifest = RunManifest(a.command, argv, a.config, seed, inputs, outputs, version_string(),
                           round(time.time() - t0, 3), started)
    manifest.write(_manifest_path(a, outputs))
    return 0


if __name__ == "__main__":
    sys.exit(main())
