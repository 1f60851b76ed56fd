"""Command-line entry point.

Configuration is plain ``key=value`` text, one pair per line, ``#`` starts a
comment. Every run writes into ``<out>/<run_id>`` where ``run_id`` hashes the
effective configuration, so re-running from the echoed ``config.txt`` lands in
the same directory and reproduces the same files.

Each subcommand writes ``metrics-<command>.jsonl`` with no wall-clock values;
timings are kept apart in ``timing-<command>.jsonl`` so that metrics files
compare byte-for-byte across runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from .augment import AugmentationConfig
from .data import Dataset, SyntheticDatasetSpec, generate_dataset, load_dataset, teacher_encode_batch
from .errors import ConfigError, CRLSCError
from .kbnet import DeviceConfig, KBServer, RemoteRetriever, parse_addr, transfer_demo
from .nn import load_params, save_params
from .pqkb import PQConfig, build_kb, kb_load, kb_save
from .semcodec import (
    ChannelModel,
    SemanticCodec,
    Stage2Config,
    TraceWriter,
    codebook_save,
    reconstruction_mse,
    train_stage2,
)
from .stage1 import ProbeConfig, TrainConfig, build_private_kb, linear_probe_eval, train_stage1

log = logging.getLogger("crlsc")

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.classes": 3,
    "data.per_class": 100,
    "data.h": 8,
    "data.w": 8,
    "data.ch": 3,
    "data.seed": 0,
    "data.train_sample": 1,
    "data.test_sample": 2,
    "data.peer_sample": 3,
    "data.server_sample": 100,
    "data.server_per_class": 300,
    "teacher.seed": 0,
    "pq.m": 8,
    "pq.k_star": 16,
    "pq.iters": 25,
    "fusion.enabled": True,
    "fusion.mode": "literal",
    "fusion.top_n": 30,
    "fusion.score_with_perturbed": False,
    "noise.mean": 0.0,
    "noise.var": 0.2,
    "train.tau": 0.1,
    "train.lr": 0.005,
    "train.epochs": 20,
    "train.batch": 32,
    "train.negatives": "positives",
    "train.grad_through_fusion": True,
    "train.hidden": "128",
    "train.out_dim": 64,
    "codec.K": 16,
    "codec.tokens": 8,
    "codec.beta": 0.25,
    "codec.channel_p": 0.0,
    "codec.lr": 0.005,
    "codec.epochs": 20,
    "codec.batch": 32,
    "codec.freeze_codebook": False,
    "probe.hidden": 64,
    "probe.epochs": 200,
    "probe.lr": 0.01,
    "net.addr": "127.0.0.1:7431",
    "net.timeout_ms": 5000,
}


class UsageError(ConfigError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


def parse_config(text: str) -> dict:
    """Parse ``key=value`` lines into overrides; unknown keys are rejected."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in DEFAULTS:
            raise UsageError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def effective_config(overrides: dict | None = None, seed: int | None = None) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(overrides or {})
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def config_text(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)

    return "".join(f"{k}={fmt(cfg[k])}\n" for k in sorted(cfg))


def run_id(cfg: dict) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# config to module objects


def dataset_spec(cfg: dict, per_class: int | None = None) -> SyntheticDatasetSpec:
    return SyntheticDatasetSpec(
        classes=cfg["data.classes"],
        per_class=per_class if per_class is not None else cfg["data.per_class"],
        h=cfg["data.h"],
        w=cfg["data.w"],
        ch=cfg["data.ch"],
        seed=cfg["data.seed"],
    )


def pq_config(cfg: dict, d: int) -> PQConfig:
    return PQConfig(d=d, m=cfg["pq.m"], k_star=cfg["pq.k_star"], kmeans_iters=cfg["pq.iters"], seed=cfg["seed"])


def train_config(cfg: dict) -> TrainConfig:
    try:
        hidden = tuple(int(h) for h in str(cfg["train.hidden"]).split(",") if h.strip())
    except ValueError as exc:
        raise UsageError(f"bad train.hidden {cfg['train.hidden']!r}") from exc
    return TrainConfig(
        tau=cfg["train.tau"],
        lr=cfg["train.lr"],
        epochs=cfg["train.epochs"],
        batch=cfg["train.batch"],
        negatives=cfg["train.negatives"],
        fusion=cfg["fusion.enabled"],
        fusion_mode=cfg["fusion.mode"],
        top_n=cfg["fusion.top_n"],
        noise_mean=cfg["noise.mean"],
        noise_var=cfg["noise.var"],
        grad_through_fusion=cfg["train.grad_through_fusion"],
        score_with_perturbed=cfg["fusion.score_with_perturbed"],
        hidden=hidden,
        out_dim=cfg["train.out_dim"],
        seed=cfg["seed"],
    )


def stage2_config(cfg: dict) -> Stage2Config:
    return Stage2Config(
        k=cfg["codec.K"],
        tokens=cfg["codec.tokens"],
        beta=cfg["codec.beta"],
        lr=cfg["codec.lr"],
        codebook_lr=cfg["codec.lr"],
        epochs=cfg["codec.epochs"],
        batch=cfg["codec.batch"],
        freeze_codebook=cfg["codec.freeze_codebook"],
        seed=cfg["seed"],
    )


def probe_config(cfg: dict) -> ProbeConfig:
    return ProbeConfig(hidden=cfg["probe.hidden"], epochs=cfg["probe.epochs"], lr=cfg["probe.lr"], seed=cfg["seed"])


def validate(cfg: dict) -> None:
    """Build every module config once so bad values fail before any work."""
    try:
        dataset_spec(cfg)
        pq_config(cfg, cfg["train.out_dim"])
        tc = train_config(cfg)
        stage2_config(cfg)
        ChannelModel(cfg["codec.channel_p"])
        if tc.fusion_mode not in ("literal", "softmax"):
            raise UsageError(f"unknown fusion.mode {tc.fusion_mode!r}")
        if tc.negatives not in ("positives", "all"):
            raise UsageError(f"unknown train.negatives {tc.negatives!r}")
        if cfg["noise.var"] < 0:
            raise UsageError("noise.var must be >= 0")
    except CRLSCError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# run directory and metrics


class Run:
    def __init__(self, cfg: dict, out_root, command: str) -> None:
        self.cfg = cfg
        self.id = run_id(cfg)
        self.dir = Path(out_root) / self.id
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.txt").write_text(config_text(cfg))
        self.metrics_path = self.dir / f"metrics-{command}.jsonl"
        self._metrics = open(self.metrics_path, "w", encoding="utf-8")
        self._timing = open(self.dir / f"timing-{command}.jsonl", "w", encoding="utf-8")
        self._last_epoch: dict[tuple[str, str], int] = {}

    def metric(self, phase: str, name: str, value, epoch: int | None = None) -> None:
        if epoch is not None:
            if epoch < self._last_epoch.get((phase, name), 0):
                raise CRLSCError(f"epoch went backwards in phase {phase}")
            self._last_epoch[(phase, name)] = epoch
        rec = {"run_id": self.id, "phase": phase}
        if epoch is not None:
            rec["epoch"] = epoch
        rec.update({"metric": name, "value": value})
        self._metrics.write(json.dumps(rec) + "\n")

    def timing(self, phase: str, wall_ms: float, epoch: int | None = None) -> None:
        rec = {"run_id": self.id, "phase": phase, "epoch": epoch, "wall_ms": round(wall_ms, 3)}
        self._timing.write(json.dumps(rec) + "\n")

    def epoch_logger(self, phase: str, fields: tuple[str, ...]):
        def on_epoch(rec):
            d = rec.as_dict()
            for f in fields:
                self.metric(phase, f, d[f], rec.epoch)
            self.timing(phase, rec.wall_ms, rec.epoch)
            log.info("%s epoch %d %s", phase, rec.epoch, " ".join(f"{f}={d[f]:.6g}" for f in fields))

        return on_epoch

    def close(self) -> None:
        self._metrics.close()
        self._timing.close()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# pipeline steps


def _dataset(cfg: dict, sample_key: str, path=None) -> Dataset:
    if path:
        ds, classes = load_dataset(path)
        if classes != cfg["data.classes"]:
            raise ConfigError(f"dataset declares {classes} classes, config says {cfg['data.classes']}")
        return ds
    return generate_dataset(dataset_spec(cfg), cfg[sample_key])


def step_build_kb(run: Run, dataset_path=None) -> Path:
    cfg = run.cfg
    t0 = time.perf_counter()
    if dataset_path:
        server = _dataset(cfg, "data.server_sample", dataset_path)
    else:
        server = generate_dataset(dataset_spec(cfg, cfg["data.server_per_class"]), cfg["data.server_sample"])
    d = cfg["train.out_dim"]
    emb = teacher_encode_batch(server.images, cfg["teacher.seed"], d=d)
    kb = build_kb(emb, pq_config(cfg, d), labels=server.labels, source_tag="skb")
    path = run.dir / "skb.crkb"
    size = kb_save(kb, path)
    c = kb.codebook.config
    scalars = kb.codebook.storage_scalars
    code_bytes = len(kb) * c.m * c.code_dtype.itemsize
    print(f"N={len(kb)} d={c.d} m={c.m} k*={c.k_star} bytes={size} "
          f"codebook_scalars={scalars} code_bytes={code_bytes}")
    for name, value in (("entries", len(kb)), ("bytes", size), ("codebook_scalars", scalars), ("code_bytes", code_bytes)):
        run.metric("build-kb", name, value)
    run.timing("build-kb", (time.perf_counter() - t0) * 1e3)
    return path


def _resolve_kb(source: str, timeout_ms: int):
    """A path to a KB file, or a ``host:port`` address of a served one."""
    p = Path(source)
    if p.exists():
        return kb_load(p), None
    return None, RemoteRetriever(source, timeout_ms / 1e3)


def step_train_encoder(run: Run, skb_source) -> Path:
    cfg = run.cfg
    tc = train_config(cfg)
    ds = _dataset(cfg, "data.train_sample")
    retr = None
    if skb_source is None or not tc.fusion:
        kb = None
    elif isinstance(skb_source, (str, Path)):
        kb, retr = _resolve_kb(str(skb_source), cfg["net.timeout_ms"])
        kb = kb if kb is not None else retr
    else:
        kb = skb_source
    try:
        res = train_stage1(ds, kb, tc, AugmentationConfig(seed=cfg["seed"]),
                           on_epoch=run.epoch_logger("train-encoder", ("loss", "lr")))
    finally:
        if retr is not None:
            retr.close()
    path = run.dir / "encoder.crnn"
    save_params(res.encoder, path)
    return path


def step_train_decoder(run: Run, encoder_path, trace: bool = False) -> tuple[Path, Path]:
    cfg = run.cfg
    enc = load_params(encoder_path)
    ds = _dataset(cfg, "data.train_sample")
    ch = ChannelModel(cfg["codec.channel_p"], cfg["seed"])
    writer = TraceWriter(run.dir / "trace.jsonl") if trace else None
    try:
        res = train_stage2(enc, ds, ch, stage2_config(cfg), trace=writer,
                           on_epoch=run.epoch_logger("train-decoder", ("mse", "codebook", "corrupted")))
    finally:
        if writer is not None:
            writer.close()
    dec_path, cb_path = run.dir / "decoder.crnn", run.dir / "codebook.crvq"
    save_params(res.decoder, dec_path)
    codebook_save(res.codebook, cb_path)
    codec = SemanticCodec(enc, res.codebook, res.decoder, cfg["codec.tokens"])
    test = _dataset(cfg, "data.test_sample")
    mse = reconstruction_mse(codec, test, ch)
    run.metric("train-decoder", "test_mse", mse)
    print(f"final train mse={res.metrics[-1].mse if res.metrics else float('nan'):.6g} test mse={mse:.6g}")
    return dec_path, cb_path


def step_eval(run: Run, encoder_path, dataset_path=None) -> dict:
    cfg = run.cfg
    enc = load_params(encoder_path)
    train = _dataset(cfg, "data.train_sample")
    test = _dataset(cfg, "data.test_sample", dataset_path)
    t0 = time.perf_counter()
    res = linear_probe_eval(enc, train, test, cfg["data.classes"], probe_config(cfg))
    run.metric("eval", "top1", res.top1)
    run.metric("eval", "top5", res.top5)
    run.timing("eval", (time.perf_counter() - t0) * 1e3)
    print(f"top1={res.top1:.4f} top5={res.top5:.4f}")
    return {"top1": res.top1, "top5": res.top5}


# --------------------------------------------------------------------------
# subcommands


def cmd_build_kb(args, run: Run) -> int:
    step_build_kb(run, args.dataset)
    return 0


def cmd_serve(args, run: Run) -> int:
    kb = kb_load(args.kb)
    host, port = parse_addr(args.addr or run.cfg["net.addr"])
    srv = KBServer(kb, host, port)
    print(f"serving {kb.source_tag} N={len(kb)} on {srv.addr}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_train_encoder(args, run: Run) -> int:
    path = step_train_encoder(run, args.skb)
    print(f"encoder written to {path}")
    return 0


def cmd_train_decoder(args, run: Run) -> int:
    step_train_decoder(run, args.encoder, args.trace)
    return 0


def cmd_eval(args, run: Run) -> int:
    step_eval(run, args.encoder, args.dataset)
    return 0


def cmd_transfer_demo(args, run: Run) -> int:
    cfg = run.cfg
    skb_path = step_build_kb(run)
    tc = train_config(cfg)
    aug = AugmentationConfig(seed=cfg["seed"])
    a = DeviceConfig("A", _dataset(cfg, "data.train_sample"), tc, aug)
    b = DeviceConfig("B", _dataset(cfg, "data.peer_sample"), tc, aug)
    report = transfer_demo(
        skb_path, a, b, _dataset(cfg, "data.test_sample"), cfg["data.classes"],
        pq_config(cfg, tc.out_dim), run.dir, probe_config(cfg),
    )
    report["run_id"] = run.id
    for kb_name, entry in report["kbs"].items():
        entry["path"] = Path(entry["path"]).name
    for dev, vals in report["devices"].items():
        run.metric("transfer-demo", f"{dev}.top1", vals["top1"])
        for epoch, loss in enumerate(vals["losses"], 1):
            run.metric(f"transfer-demo:{dev}", "loss", loss, epoch)
    (run.dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    d = report["devices"]
    print(f"A top1={d['A']['top1']:.4f} B top1={d['B']['top1']:.4f} "
          f"B baseline top1={d['B-baseline']['top1']:.4f} beats={report['device_b_beats_baseline']}")
    for name, entry in report["kbs"].items():
        print(f"{name} sha256={entry['sha256']}")
    return 0


def cmd_e2e(args, run: Run) -> int:
    cfg = run.cfg
    skb = step_build_kb(run)
    enc = step_train_encoder(run, skb)
    pkb = build_private_kb(load_params(enc), _dataset(cfg, "data.train_sample"),
                           pq_config(cfg, cfg["train.out_dim"]), tag="local")
    pkb_path = run.dir / "pkb.crkb"
    kb_save(pkb, pkb_path)
    run.metric("build-pkb", "entries", len(pkb))
    dec, cb = step_train_decoder(run, enc)
    probe = step_eval(run, enc)
    summary = {
        "run_id": run.id,
        "probe": probe,
        "files": {p.name: file_hash(p) for p in (skb, pkb_path, enc, dec, cb)},
    }
    (run.dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"run {run.id} complete: {run.dir}")
    return 0


COMMANDS = {
    "build-kb": cmd_build_kb,
    "serve": cmd_serve,
    "train-encoder": cmd_train_encoder,
    "train-decoder": cmd_train_decoder,
    "eval": cmd_eval,
    "transfer-demo": cmd_transfer_demo,
    "e2e": cmd_e2e,
}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copy must not overwrite values given before the subcommand
    def dflt(v):
        return argparse.SUPPRESS if suppress else v

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=dflt(None), help="key=value config file")
    common.add_argument("--seed", type=int, default=dflt(None), help="overrides the config seed")
    common.add_argument("--out", type=Path, default=dflt(Path("runs")), help="root of run directories")
    common.add_argument("--log-level", default=dflt("WARNING"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(
        prog="crlsc", description=__doc__.splitlines()[0], parents=[_global_flags(suppress=False)]
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("build-kb", parents=[common], help="teacher-encode a dataset into a shared KB")
    p.add_argument("--dataset", type=Path, help="CRDS dataset file (default: synthetic)")
    p = sub.add_parser("serve", parents=[common], help="serve a KB file over TCP")
    p.add_argument("--kb", required=True, type=Path)
    p.add_argument("--addr", help="host:port (default: net.addr)")
    p = sub.add_parser("train-encoder", parents=[common], help="stage-1 contrastive training")
    p.add_argument("--skb", help="KB file or host:port of a served KB; omit for an unguided run")
    p = sub.add_parser("train-decoder", parents=[common], help="stage-2 codec training")
    p.add_argument("--encoder", required=True, type=Path)
    p.add_argument("--trace", action="store_true", help="write trace.jsonl of transmitted indices")
    p = sub.add_parser("eval", parents=[common], help="probe accuracy of a trained encoder")
    p.add_argument("--encoder", required=True, type=Path)
    p.add_argument("--dataset", type=Path, help="CRDS test set (default: synthetic)")
    sub.add_parser("transfer-demo", parents=[common], help="SKB -> device A -> PKB -> device B")
    sub.add_parser("e2e", parents=[common], help="build-kb, train-encoder, PKB, train-decoder, eval")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_config(args.config.read_text()) if args.config else {}
        cfg = effective_config(overrides, args.seed)
        validate(cfg)
    except (UsageError, OSError) as exc:
        print(f"crlsc: error: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg, args.out, args.command)
    log.info("run %s in %s", run.id, run.dir)
    try:
        return COMMANDS[args.command](args, run)
    except (CRLSCError, OSError) as exc:
        print(f"crlsc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        run.close()


if __name__ == "__main__":
    sys.exit(main())
