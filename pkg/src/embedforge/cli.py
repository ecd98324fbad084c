"""Command-line surface: pretrain, finetune, mine-negs, embed, eval, report.

Every command resolves its inputs into a manifest written next to the
outputs, so a run can be reproduced from the manifest alone. Exit codes:
0 success, 2 configuration problems, 3 data problems, 1 anything else.
Seed precedence is flag > EMBEDFORGE_SEED > config value.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, datamix, embedder, evalkit, trainer
from .errors import ConfigError, DataError, EmbedForgeError

SCHEMA_VERSION = 1
SEED_ENV_VAR = "EMBEDFORGE_SEED"


def _fail_cfg(msg: str) -> ConfigError:
    return ConfigError(msg)


def load_config(path: str | Path) -> dict:
    """Read and schema-check a run config document."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise _fail_cfg(f"config file not found: {path}") from exc
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise _fail_cfg(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise _fail_cfg(f"{path}: config must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise _fail_cfg(f"{path}: field 'schema_version' must be {SCHEMA_VERSION}, got {version!r}")
    for section in ("model", "train"):
        if section in cfg and not isinstance(cfg[section], dict):
            raise _fail_cfg(f"{path}: field {section!r} must be an object")
    return cfg


def resolve_seed(args, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise _fail_cfg(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
    return int(cfg.get("seed", 0))


def _resolve_out_dir(args, cfg: dict) -> Path:
    out = getattr(args, "out_dir", None) or cfg.get("out_dir")
    if not out:
        raise _fail_cfg("no output directory: set --out-dir or config field 'out_dir'")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _mixture_from_config(cfg: dict, cfg_path: Path, seed: int) -> datamix.MixtureSpec:
    data = cfg.get("data")
    if not isinstance(data, dict) or not isinstance(data.get("sources"), list) or not data["sources"]:
        raise _fail_cfg(f"{cfg_path}: field 'data.sources' must be a nonempty list")
    sources = []
    for i, src in enumerate(data["sources"]):
        if not isinstance(src, dict) or "name" not in src or "path" not in src:
            raise _fail_cfg(f"{cfg_path}: data.sources[{i}] needs 'name' and 'path'")
        if ("quota" in src) == ("rate" in src):
            raise _fail_cfg(f"{cfg_path}: data.sources[{i}] needs exactly one of 'quota'/'rate'")
        uri = str((cfg_path.parent / src["path"]).resolve())
        try:
            sources.append(
                datamix.SourceSpec(src["name"], uri, src.get("quota"), src.get("rate"))
            )
        except ValueError as exc:
            raise _fail_cfg(f"{cfg_path}: data.sources[{i}]: {exc}") from exc
    try:
        return datamix.MixtureSpec(tuple(sources), seed=seed)
    except ValueError as exc:
        raise _fail_cfg(f"{cfg_path}: {exc}") from exc


def _model_from_config(cfg: dict, seed: int) -> embedder.EmbeddingModel:
    model_cfg = cfg.get("model", {})
    size_class = model_cfg.get("size_class", "small")
    if size_class not in embedder.SIZE_DEFAULTS:
        raise _fail_cfg(f"model.size_class must be one of {sorted(embedder.SIZE_DEFAULTS)}")
    vocab = model_cfg.get("vocab_size", embedder.SIZE_DEFAULTS[size_class][0])
    tok = embedder.TokenizerConfig(
        n_gram_sizes=tuple(model_cfg.get("n_gram_sizes", (3, 4))),
        vocab_size=vocab,
        hash_seed=model_cfg.get("hash_seed", 0),
    )
    return embedder.init_model(
        size_class,
        seed=seed,
        tokenizer=tok,
        hidden_dim=model_cfg.get("hidden_dim"),
        output_dim=model_cfg.get("output_dim"),
    )


def _train_config(cfg: dict, stage: str, seed: int) -> trainer.TrainConfig:
    model_cfg = cfg.get("model", {})
    size_class = model_cfg.get("size_class", "small")
    base = trainer.default_config(stage, size_class)
    train = cfg.get("train", {})
    known = {
        "batch_size", "steps", "epochs", "lr", "tau", "alpha",
        "kd_tau_teacher", "kd_tau_student",
    }
    unknown = set(train) - known
    if unknown:
        raise _fail_cfg(f"unknown train fields: {sorted(unknown)}")
    fields = {k: train[k] for k in known if k in train}
    try:
        return trainer.TrainConfig(
            stage=stage,
            size_class=size_class,
            batch_size=fields.get("batch_size", base.batch_size),
            steps=fields.get("steps", base.steps) if stage == trainer.STAGE_PRETRAIN else None,
            epochs=fields.get("epochs", base.epochs) if stage == trainer.STAGE_FINETUNE else None,
            lr=fields.get("lr", base.lr),
            tau=fields.get("tau", base.tau),
            alpha=fields.get("alpha", base.alpha),
            seed=seed,
            kd_tau_teacher=fields.get("kd_tau_teacher", base.kd_tau_teacher),
            kd_tau_student=fields.get("kd_tau_student", base.kd_tau_student),
        )
    except ValueError as exc:
        raise _fail_cfg(f"train config: {exc}") from exc


def write_manifest(out_dir: Path, command: str, resolved: dict, inputs: list, outputs: list) -> Path:
    manifest = {
        "tool": "embedforge",
        "version": __version__,
        "command": command,
        "resolved": resolved,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_telemetry(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def _run_training(args, stage: str) -> int:
    cfg_path = Path(args.config)
    cfg = load_config(cfg_path)
    seed = resolve_seed(args, cfg)
    out_dir = _resolve_out_dir(args, cfg)
    mixture = _mixture_from_config(cfg, cfg_path, seed)
    train_cfg = _train_config(cfg, stage, seed)
    pairs = datamix.materialize_mixture(mixture)
    batches = datamix.build_batches(pairs, train_cfg.batch_size, seed)
    telemetry: list[dict] = []

    if stage == trainer.STAGE_PRETRAIN:
        model = _model_from_config(cfg, seed)
        ckpt = trainer.pretrain(model, batches, train_cfg, telemetry.append)
        columns = ["step", "loss"]
        teacher_name = None
    else:
        init_path = cfg.get("init_checkpoint")
        if not init_path:
            raise _fail_cfg(f"{cfg_path}: finetune needs field 'init_checkpoint'")
        init_file = (cfg_path.parent / init_path).resolve()
        if not init_file.exists():
            raise DataError(f"input checkpoint not found: {init_file}")
        prior = trainer.load_checkpoint(init_file)
        teacher = None
        teacher_name = args.teacher
        if args.teacher == "oracle":
            teacher = trainer.exact_match_teacher((p.query, p.positive) for p in pairs)
        ckpt = trainer.finetune(
            prior, batches, train_cfg, teacher, telemetry.append,
            allow_refinetune=args.allow_refinetune,
        )
        columns = ["step", "loss", "ce", "kd"] if teacher else ["step", "loss", "ce"]

    ckpt_path = out_dir / "checkpoint.me5f"
    trainer.save_checkpoint(ckpt, ckpt_path)
    telemetry_path = out_dir / "telemetry.csv"
    _write_telemetry(telemetry_path, telemetry, columns)
    resolved = {
        "config_path": str(cfg_path.resolve()),
        "train": asdict(train_cfg),
        "mixture": {
            "seed": mixture.seed,
            "sources": [asdict(s) for s in mixture.sources],
        },
        "seed": seed,
        "workers": args.workers,
        "model": trainer.model_meta(ckpt.to_model()),
    }
    if stage == trainer.STAGE_FINETUNE:
        resolved["teacher"] = teacher_name
        resolved["init_checkpoint"] = str(init_file)
    manifest = write_manifest(
        out_dir, stage, resolved,
        inputs=[s.uri for s in mixture.sources],
        outputs=[ckpt_path, telemetry_path],
    )
    final_loss = telemetry[-1]["loss"] if telemetry else float("nan")
    print(f"{stage}: {ckpt.step} steps, final loss {final_loss:.6f}")
    print(f"wrote {ckpt_path}, {telemetry_path}, {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    return _run_training(args, trainer.STAGE_PRETRAIN)


def cmd_finetune(args) -> int:
    return _run_training(args, trainer.STAGE_FINETUNE)


def _load_checkpoint_arg(path: str) -> trainer.Checkpoint:
    file = Path(path)
    if not file.exists():
        raise DataError(f"checkpoint not found: {file}")
    return trainer.load_checkpoint(file)


def _read_jsonl(path: Path, required: tuple[str, ...]) -> list[dict]:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON: {exc.msg}") from exc
            for fld in required:
                if fld not in obj:
                    raise DataError(f"{path}:{line_no}: missing field {fld!r}")
            rows.append(obj)
    return rows


def cmd_mine_negs(args) -> int:
    ckpt = _load_checkpoint_arg(args.checkpoint)
    model = ckpt.to_model()
    pairs = list(datamix.load_pairs(args.pairs))
    corpus_rows = _read_jsonl(Path(args.corpus), ("id", "text"))
    corpus = {row["id"]: row["text"] for row in corpus_rows}
    queries = {f"p{i}": p.query for i, p in enumerate(pairs)}
    if args.qrels:
        qrels = evalkit.load_qrels(args.qrels)
    else:
        # Without judgments, a pair's relevant set is every doc matching its positive text.
        qrels = {
            f"p{i}": {d: 1 for d, text in corpus.items() if text == p.positive}
            for i, p in enumerate(pairs)
        }
    try:
        lo, hi = (int(x) for x in args.window.split(":"))
    except ValueError as exc:
        raise _fail_cfg(f"--window must look like LO:HI, got {args.window!r}") from exc
    mined = datamix.mine_hard_negatives(
        model, queries, corpus, qrels, k=args.k, window=(lo, hi), workers=args.workers
    )
    augmented = [
        datamix.TextPair(
            p.query, p.positive,
            tuple(corpus[d] for d in mined[f"p{i}"]),
            p.source, p.lang, p.instruction,
        )
        for i, p in enumerate(pairs)
    ]
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    datamix.write_pairs(augmented, out_path)
    write_manifest(
        out_path.parent, "mine-negs",
        {
            "checkpoint": str(args.checkpoint), "k": args.k, "window": [lo, hi],
            "qrels": args.qrels, "workers": args.workers,
        },
        inputs=[args.pairs, args.corpus] + ([args.qrels] if args.qrels else []),
        outputs=[out_path],
    )
    filled = sum(1 for p in augmented if p.negatives)
    print(f"mined negatives for {filled}/{len(augmented)} pairs -> {out_path}")
    return 0


def cmd_embed(args) -> int:
    ckpt = _load_checkpoint_arg(args.checkpoint)
    model = ckpt.to_model()
    texts_path = Path(args.texts)
    if not texts_path.exists():
        raise DataError(f"file not found: {texts_path}")
    texts = texts_path.read_text(encoding="utf-8").splitlines()
    try:
        role = embedder.InputRole(args.role, args.instruction)
    except EmbedForgeError:
        raise
    embs = embedder.encode_batch(model, role, texts, workers=args.workers)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if args.text_format:
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in embs:
                fh.write("\t".join(repr(float(x)) for x in row) + "\n")
        outputs = [out_path]
    else:
        embs32 = embs.astype("<f4")
        out_path.write_bytes(embs32.tobytes())
        header = {
            "count": int(embs32.shape[0]),
            "dim": int(model.output_dim),
            "dtype": "float32",
            "byte_order": "little",
            "role": args.role,
            "instruction": args.instruction,
        }
        header_path = Path(str(out_path) + ".json")
        header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        outputs = [out_path, header_path]
    write_manifest(
        out_path.parent, "embed",
        {
            "checkpoint": str(args.checkpoint), "role": args.role,
            "instruction": args.instruction, "text_format": args.text_format,
            "workers": args.workers,
        },
        inputs=[texts_path], outputs=outputs,
    )
    print(f"embedded {len(texts)} texts -> {out_path}")
    return 0


def _eval_retrieval(args, model) -> evalkit.EvalReport:
    for name in ("queries", "corpus", "qrels"):
        if getattr(args, name) is None:
            raise _fail_cfg(f"task retrieval needs --{name}")
    q_rows = _read_jsonl(Path(args.queries), ("qid", "text"))
    queries = {row["qid"]: row["text"] for row in q_rows}
    langs = {row["qid"]: row["lang"] for row in q_rows if row.get("lang")}
    corpus_rows = _read_jsonl(Path(args.corpus), ("id", "text"))
    corpus = {row["id"]: row["text"] for row in corpus_rows}
    qrels_path = Path(args.qrels)
    if not qrels_path.exists():
        raise DataError(f"file not found: {qrels_path}")
    qrels = evalkit.load_qrels(qrels_path)
    cutoffs = tuple(int(x) for x in args.cutoffs.split(","))
    run = evalkit.rank_corpus(
        model, queries, corpus, max(cutoffs), args.workers, args.instruction
    )
    report = evalkit.evaluate_run(run, qrels, cutoffs, langs or None)
    out_dir = Path(args.out_dir)
    evalkit.write_trec_run(run, out_dir / "run.trec")
    return report


def _eval_bitext(args, model) -> evalkit.EvalReport:
    for name in ("src", "tgt"):
        if getattr(args, name) is None:
            raise _fail_cfg(f"task bitext needs --{name}")
    src_path, tgt_path = Path(args.src), Path(args.tgt)
    for p in (src_path, tgt_path):
        if not p.exists():
            raise DataError(f"file not found: {p}")
    src_texts = src_path.read_text(encoding="utf-8").splitlines()
    tgt_texts = tgt_path.read_text(encoding="utf-8").splitlines()
    if len(src_texts) != len(tgt_texts):
        raise DataError(
            f"parallel files differ in length: {len(src_texts)} vs {len(tgt_texts)}"
        )
    role = embedder.InputRole(args.role)
    src_embs = embedder.encode_batch(model, role, src_texts, args.workers)
    tgt_embs = embedder.encode_batch(model, role, tgt_texts, args.workers)
    gold = list(range(len(src_texts)))
    forward = evalkit.bitext_accuracy(src_embs, tgt_embs, gold, args.mode, args.margin_k)
    backward = evalkit.bitext_accuracy(tgt_embs, src_embs, gold, args.mode, args.margin_k)
    return evalkit.EvalReport(
        task="bitext",
        values={"accuracy": {"forward": forward, "backward": backward}},
        metadata={"mode": args.mode, "margin_k": args.margin_k, "pairs": len(src_texts)},
    )


def _eval_sts(args, model) -> evalkit.EvalReport:
    if args.data is None:
        raise _fail_cfg("task sts needs --data")
    data_path = Path(args.data)
    if not data_path.exists():
        raise DataError(f"file not found: {data_path}")
    left, right, gold = [], [], []
    with open(data_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataError(f"{data_path}:{line_no}: expected 3 tab-separated columns")
            left.append(cols[0])
            right.append(cols[1])
            gold.append(float(cols[2]))
    role = embedder.InputRole(embedder.ROLE_SYMMETRIC)
    a = embedder.encode_batch(model, role, left, args.workers)
    b = embedder.encode_batch(model, role, right, args.workers)
    predicted = list(np.einsum("ij,ij->i", a, b))
    rho = evalkit.spearman(predicted, gold)
    return evalkit.EvalReport(
        task="sts",
        values={"spearman": {"all": rho}},
        metadata={"pairs": len(gold)},
    )


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint_arg(args.checkpoint)
    model = ckpt.to_model()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runners = {"retrieval": _eval_retrieval, "bitext": _eval_bitext, "sts": _eval_sts}
    report = runners[args.task](args, model)
    evalkit.report_to_json(report, out_dir / "report.json")
    evalkit.report_to_tsv(report, out_dir / "report.tsv")
    write_manifest(
        out_dir, "eval",
        {
            "checkpoint": str(args.checkpoint), "task": args.task,
            "workers": args.workers,
            "inputs": {
                k: getattr(args, k, None)
                for k in ("queries", "corpus", "qrels", "src", "tgt", "data")
            },
            "mode": getattr(args, "mode", None),
            "instruction": getattr(args, "instruction", None),
        },
        inputs=[], outputs=[out_dir / "report.json", out_dir / "report.tsv"],
    )
    for name, mean in sorted(report.section_means.items()):
        print(f"{name} {mean:.3f}")
    return 0


def cmd_report(args) -> int:
    sections_path = Path(args.sections)
    if not sections_path.exists():
        raise DataError(f"file not found: {sections_path}")
    try:
        sections = json.loads(sections_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{sections_path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(sections, dict) or not all(isinstance(v, list) for v in sections.values()):
        raise DataError(f"{sections_path}: expected an object mapping section -> list of numbers")
    report = evalkit.aggregate_report(sections)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evalkit.report_to_json(report, out_dir / "report.json")
    evalkit.report_to_tsv(report, out_dir / "report.tsv")
    write_manifest(
        out_dir, "report", {"sections": str(sections_path)},
        inputs=[sections_path], outputs=[out_dir / "report.json", out_dir / "report.tsv"],
    )
    for name, mean in sorted(report.section_means.items()):
        print(f"{name} mean={mean:.6f} rounded={round(mean, 1):.1f}")
    print(f"GRAND mean={report.grand_mean:.6f} rounded={round(report.grand_mean, 1):.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embedforge",
        description="Two-stage contrastive bi-encoder training and evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"embedforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--seed", type=int, default=None, help="overrides env and config seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out-dir", default=None)
        if config:
            p.add_argument("--config", required=True)

    p = sub.add_parser("pretrain", help="stage-1 contrastive pre-training")
    common(p, config=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage-2 fine-tuning with hard negatives")
    common(p, config=True)
    p.add_argument("--teacher", choices=["none", "oracle"], default="none")
    p.add_argument("--allow-refinetune", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("mine-negs", help="attach mined hard negatives to a pair file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--qrels", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=datamix.DEFAULT_MINE_K)
    p.add_argument("--window", default=f"{datamix.DEFAULT_MINE_WINDOW[0]}:{datamix.DEFAULT_MINE_WINDOW[1]}")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_mine_negs)

    p = sub.add_parser("embed", help="embed a file of texts, one per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--role", choices=["query", "passage", "symmetric"], default="query")
    p.add_argument("--instruction", default=None)
    p.add_argument("--text-format", action="store_true", help="write TSV instead of binary")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="run retrieval / bitext / sts evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=["retrieval", "bitext", "sts"], required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--queries", default=None, help="retrieval: JSONL with qid/text[/lang]")
    p.add_argument("--corpus", default=None, help="retrieval: JSONL with id/text")
    p.add_argument("--qrels", default=None, help="retrieval: TREC qrels")
    p.add_argument("--cutoffs", default="10,100")
    p.add_argument("--instruction", default=None)
    p.add_argument("--src", default=None, help="bitext: source side, one text per line")
    p.add_argument("--tgt", default=None, help="bitext: target side, parallel lines")
    p.add_argument("--mode", choices=["cosine", "margin"], default="cosine")
    p.add_argument("--margin-k", type=int, default=4)
    p.add_argument("--role", choices=["query", "passage", "symmetric"], default="symmetric")
    p.add_argument("--data", default=None, help="sts: TSV text1/text2/score")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate metric sections into a report")
    p.add_argument("--sections", required=True, help="JSON object: section -> list of values")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"embedforge: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"embedforge: data error: {exc}", file=sys.stderr)
        return 3
    except EmbedForgeError as exc:
        print(f"embedforge: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"embedforge: unexpected error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
