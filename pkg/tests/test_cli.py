"""Command-line surface tests: exit codes, artifacts, idempotence."""

import json
import os

import numpy as np
import pytest

import synthcorpus as sc
from embedforge import datamix, embedder, trainer
from embedforge.cli import main


def run_cli(*argv) -> int:
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny pair file + pretrain config + finished stage-1 checkpoint."""
    root = tmp_path_factory.mktemp("cliws")
    train, task, _lex = sc.stage1_corpus(seed=0, n_train=160, n_heldout=24, n_topics=4)
    datamix.write_pairs(train, root / "pairs.jsonl")
    config = {
        "schema_version": 1,
        "seed": 5,
        "out_dir": str(root / "run-pre"),
        "model": {"size_class": "small", "vocab_size": 1024, "hidden_dim": 16, "output_dim": 16},
        "data": {"sources": [{"name": "synth", "path": "pairs.jsonl", "rate": 1.0}]},
        "train": {"batch_size": 16, "steps": 30, "lr": 3e-4, "tau": 0.2},
    }
    (root / "pretrain.json").write_text(json.dumps(config))
    assert run_cli("pretrain", "--config", str(root / "pretrain.json")) == 0
    return {"root": root, "task": task, "train": train, "config": config}


class TestPretrainCommand:
    def test_outputs_exist(self, workspace):
        out = workspace["root"] / "run-pre"
        for name in ("checkpoint.me5f", "telemetry.csv", "manifest.json"):
            assert (out / name).exists()
        header = (out / "telemetry.csv").read_text().splitlines()[0]
        assert header == "step,loss"

    def test_rerun_is_byte_identical(self, workspace):
        root = workspace["root"]
        cfg = dict(workspace["config"], out_dir=str(root / "run-pre2"))
        (root / "pretrain2.json").write_text(json.dumps(cfg))
        assert run_cli("pretrain", "--config", str(root / "pretrain2.json")) == 0
        a = (root / "run-pre" / "checkpoint.me5f").read_bytes()
        b = (root / "run-pre2" / "checkpoint.me5f").read_bytes()
        assert a == b
        assert (root / "run-pre" / "telemetry.csv").read_text() == (
            root / "run-pre2" / "telemetry.csv"
        ).read_text()

    def test_manifest_is_resolved(self, workspace):
        manifest = json.loads((workspace["root"] / "run-pre" / "manifest.json").read_text())
        assert manifest["command"] == "pretrain"
        assert manifest["resolved"]["seed"] == 5
        assert manifest["resolved"]["train"]["stage"] == "pretrain"
        assert manifest["outputs"]

    def test_missing_data_file_exits_3(self, workspace, tmp_path, capsys):
        cfg = dict(workspace["config"])
        cfg["data"] = {"sources": [{"name": "gone", "path": "missing.jsonl", "rate": 1.0}]}
        cfg["out_dir"] = str(tmp_path / "out")
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(cfg))
        assert run_cli("pretrain", "--config", str(path)) == 3

    def test_malformed_config_exits_2(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{ not json")
        assert run_cli("pretrain", "--config", str(path)) == 2
        err = capsys.readouterr().err
        assert "config error" in err

    def test_wrong_schema_version_exits_2(self, tmp_path):
        path = tmp_path / "v9.json"
        path.write_text(json.dumps({"schema_version": 9}))
        assert run_cli("pretrain", "--config", str(path)) == 2

    def test_config_file_missing_exits_2(self, tmp_path):
        assert run_cli("pretrain", "--config", str(tmp_path / "ghost.json")) == 2

    def test_seed_precedence_flag_over_env_over_config(self, workspace, tmp_path):
        root = workspace["root"]

        def run_with(seed_flag=None, env=None, out="x"):
            cfg = dict(workspace["config"], out_dir=str(tmp_path / out))
            path = root / f"seedtest-{out}.json"
            path.write_text(json.dumps(cfg))
            argv = ["pretrain", "--config", str(path)]
            if seed_flag is not None:
                argv += ["--seed", str(seed_flag)]
            old = os.environ.pop("EMBEDFORGE_SEED", None)
            try:
                if env is not None:
                    os.environ["EMBEDFORGE_SEED"] = str(env)
                assert run_cli(*argv) == 0
            finally:
                os.environ.pop("EMBEDFORGE_SEED", None)
                if old is not None:
                    os.environ["EMBEDFORGE_SEED"] = old
            return json.loads((tmp_path / out / "manifest.json").read_text())["resolved"]["seed"]

        assert run_with(out="cfg") == 5                       # config value
        assert run_with(env=9, out="env") == 9                # env overrides config
        assert run_with(seed_flag=3, env=9, out="flag") == 3  # flag overrides env


class TestFinetuneCommand:
    def test_finetune_after_pretrain(self, workspace, tmp_path):
        root = workspace["root"]
        cfg = {
            "schema_version": 1,
            "seed": 5,
            "out_dir": str(tmp_path / "run-ft"),
            "model": {"size_class": "small", "vocab_size": 1024, "hidden_dim": 16, "output_dim": 16},
            "data": {"sources": [{"name": "synth", "path": "pairs.jsonl", "rate": 1.0}]},
            "train": {"batch_size": 16, "epochs": 1, "lr": 3e-5, "tau": 0.2},
            "init_checkpoint": "run-pre/checkpoint.me5f",
        }
        path = root / "finetune.json"
        path.write_text(json.dumps(cfg))
        assert run_cli("finetune", "--config", str(path), "--teacher", "oracle") == 0
        ckpt = trainer.load_checkpoint(tmp_path / "run-ft" / "checkpoint.me5f")
        assert ckpt.stage == "finetune"
        header = (tmp_path / "run-ft" / "telemetry.csv").read_text().splitlines()[0]
        assert header == "step,loss,ce,kd"

    def test_missing_checkpoint_exits_3(self, workspace, tmp_path):
        root = workspace["root"]
        cfg = {
            "schema_version": 1,
            "out_dir": str(tmp_path / "nope"),
            "data": {"sources": [{"name": "synth", "path": "pairs.jsonl", "rate": 1.0}]},
            "train": {"batch_size": 16, "epochs": 1},
            "init_checkpoint": "absent.me5f",
        }
        path = root / "ft-missing.json"
        path.write_text(json.dumps(cfg))
        assert run_cli("finetune", "--config", str(path)) == 3

    def test_config_without_init_checkpoint_exits_2(self, workspace, tmp_path):
        root = workspace["root"]
        cfg = {
            "schema_version": 1,
            "out_dir": str(tmp_path / "nope2"),
            "data": {"sources": [{"name": "synth", "path": "pairs.jsonl", "rate": 1.0}]},
            "train": {"batch_size": 16, "epochs": 1},
        }
        path = root / "ft-noinit.json"
        path.write_text(json.dumps(cfg))
        assert run_cli("finetune", "--config", str(path)) == 2


class TestMineNegsCommand:
    def test_single_relevant_corpus_gives_empty_negatives(self, workspace, tmp_path):
        root = workspace["root"]
        pair = workspace["train"][0]
        pairs_path = tmp_path / "one.jsonl"
        datamix.write_pairs([pair], pairs_path)
        corpus_path = tmp_path / "corpus.jsonl"
        corpus_path.write_text(json.dumps({"id": "d0", "text": pair.positive}) + "\n")
        out = tmp_path / "mined.jsonl"
        code = run_cli(
            "mine-negs",
            "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
            "--pairs", str(pairs_path),
            "--corpus", str(corpus_path),
            "--out", str(out),
        )
        assert code == 0
        mined = list(datamix.load_pairs(out))
        assert mined[0].negatives == ()

    def test_window_excludes_top_ranked(self, workspace, tmp_path):
        root = workspace["root"]
        ckpt_path = root / "run-pre" / "checkpoint.me5f"
        model = trainer.load_checkpoint(ckpt_path).to_model()
        pair = workspace["train"][0]
        corpus = {f"d{i}": f"{pair.query} variant {i}" for i in range(5)}
        pairs_path = tmp_path / "w.jsonl"
        datamix.write_pairs([pair], pairs_path)
        corpus_path = tmp_path / "wc.jsonl"
        corpus_path.write_text(
            "".join(json.dumps({"id": k, "text": v}) + "\n" for k, v in corpus.items())
        )
        out_all = tmp_path / "all.jsonl"
        out_tail = tmp_path / "tail.jsonl"
        base = [
            "--checkpoint", str(ckpt_path),
            "--pairs", str(pairs_path),
            "--corpus", str(corpus_path),
            "--k", "5",
        ]
        assert run_cli("mine-negs", *base, "--window", "1:5", "--out", str(out_all)) == 0
        assert run_cli("mine-negs", *base, "--window", "2:4", "--out", str(out_tail)) == 0
        full = list(datamix.load_pairs(out_all))[0].negatives
        tail = list(datamix.load_pairs(out_tail))[0].negatives
        assert tail == full[1:4]

    def test_deterministic_output(self, workspace, tmp_path):
        root = workspace["root"]
        pairs_path = tmp_path / "p.jsonl"
        datamix.write_pairs(workspace["train"][:5], pairs_path)
        corpus_path = tmp_path / "c.jsonl"
        corpus_path.write_text(
            "".join(
                json.dumps({"id": f"d{i}", "text": p.positive}) + "\n"
                for i, p in enumerate(workspace["train"][:30])
            )
        )
        outs = []
        for name in ("m1.jsonl", "m2.jsonl"):
            out = tmp_path / name
            assert run_cli(
                "mine-negs",
                "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
                "--pairs", str(pairs_path),
                "--corpus", str(corpus_path),
                "--out", str(out),
            ) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestEmbedCommand:
    def test_empty_input(self, workspace, tmp_path):
        root = workspace["root"]
        texts = tmp_path / "empty.txt"
        texts.write_text("")
        out = tmp_path / "embs.bin"
        assert run_cli(
            "embed",
            "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
            "--texts", str(texts), "--out", str(out),
        ) == 0
        assert out.read_bytes() == b""
        header = json.loads((tmp_path / "embs.bin.json").read_text())
        assert header["count"] == 0 and header["dtype"] == "float32"

    def test_round_trip_matches_in_process_encode(self, workspace, tmp_path):
        root = workspace["root"]
        lines = ["first text", "zweiter Text", "τρίτο κείμενο"]
        texts = tmp_path / "texts.txt"
        texts.write_text("\n".join(lines) + "\n")
        out = tmp_path / "embs.bin"
        assert run_cli(
            "embed",
            "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
            "--texts", str(texts), "--out", str(out), "--role", "passage",
        ) == 0
        header = json.loads((tmp_path / "embs.bin.json").read_text())
        embs = np.frombuffer(out.read_bytes(), dtype="<f4").reshape(header["count"], header["dim"])
        model = trainer.load_checkpoint(root / "run-pre" / "checkpoint.me5f").to_model()
        expected = embedder.encode_batch(model, embedder.PASSAGE, lines).astype(np.float32)
        np.testing.assert_array_equal(embs, expected)
        norms = np.linalg.norm(embs.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_text_format(self, workspace, tmp_path):
        root = workspace["root"]
        texts = tmp_path / "t.txt"
        texts.write_text("only line\n")
        out = tmp_path / "embs.tsv"
        assert run_cli(
            "embed",
            "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
            "--texts", str(texts), "--out", str(out), "--text-format",
        ) == 0
        row = out.read_text().splitlines()[0].split("\t")
        model = trainer.load_checkpoint(root / "run-pre" / "checkpoint.me5f").to_model()
        assert len(row) == model.output_dim
        np.testing.assert_allclose(
            [float(x) for x in row], embedder.encode(model, embedder.QUERY, "only line"), atol=0
        )

    def test_workers_do_not_change_bytes(self, workspace, tmp_path):
        root = workspace["root"]
        texts = tmp_path / "many.txt"
        texts.write_text("\n".join(f"line {i}" for i in range(130)) + "\n")
        blobs = []
        for workers, name in ((1, "w1.bin"), (8, "w8.bin")):
            out = tmp_path / name
            assert run_cli(
                "embed",
                "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
                "--texts", str(texts), "--out", str(out), "--workers", str(workers),
            ) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]


class TestEvalCommand:
    def _write_retrieval_inputs(self, tmp_path, queries, corpus, qrels):
        qp = tmp_path / "queries.jsonl"
        qp.write_text("".join(json.dumps({"qid": q, "text": t}) + "\n" for q, t in queries.items()))
        cp = tmp_path / "corpus.jsonl"
        cp.write_text("".join(json.dumps({"id": d, "text": t}) + "\n" for d, t in corpus.items()))
        rp = tmp_path / "qrels.txt"
        rp.write_text("".join(f"{q} 0 {d} {r}\n" for q, row in qrels.items() for d, r in row.items()))
        return qp, cp, rp

    def test_perfect_retrieval_prints_unity(self, workspace, tmp_path, capsys):
        root = workspace["root"]
        words = ["kumquat", "zephyr", "obsidian", "marlin"]
        queries = {f"q{i}": f"{w} {w} {w}" for i, w in enumerate(words)}
        corpus = {f"d{i}": f"{w} {w} {w} {w}" for i, w in enumerate(words)}
        qrels = {f"q{i}": {f"d{i}": 1} for i in range(len(words))}
        qp, cp, rp = self._write_retrieval_inputs(tmp_path, queries, corpus, qrels)
        out_dir = tmp_path / "eval-out"
        assert run_cli(
            "eval",
            "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
            "--task", "retrieval",
            "--queries", str(qp), "--corpus", str(cp), "--qrels", str(rp),
            "--out-dir", str(out_dir),
        ) == 0
        printed = capsys.readouterr().out
        assert "ndcg@10 1.000" in printed
        assert (out_dir / "report.json").exists()
        assert (out_dir / "report.tsv").exists()
        assert (out_dir / "run.trec").exists()

    def test_unknown_task_exits_2(self, workspace, tmp_path):
        root = workspace["root"]
        assert run_cli(
            "eval",
            "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
            "--task", "reranking",
            "--out-dir", str(tmp_path / "x"),
        ) == 2

    def test_bitext_and_sts_tasks(self, workspace, tmp_path, capsys):
        root = workspace["root"]
        ck = str(root / "run-pre" / "checkpoint.me5f")
        src = tmp_path / "src.txt"
        tgt = tmp_path / "tgt.txt"
        src.write_text("aaa aaa\nbbb bbb\nccc ccc\n")
        tgt.write_text("aaa aaa\nbbb bbb\nccc ccc\n")
        out1 = tmp_path / "bitext-out"
        assert run_cli(
            "eval", "--checkpoint", ck, "--task", "bitext",
            "--src", str(src), "--tgt", str(tgt), "--out-dir", str(out1),
        ) == 0
        report = json.loads((out1 / "report.json").read_text())
        assert report["values"]["accuracy"]["forward"] == 1.0
        assert report["values"]["accuracy"]["backward"] == 1.0

        sts = tmp_path / "sts.tsv"
        sts.write_text("aaa aaa\taaa aaa\t5.0\naaa aaa\tzzz qqq\t0.0\nbbb bbb\tbbb ccc\t3.0\n")
        out2 = tmp_path / "sts-out"
        assert run_cli(
            "eval", "--checkpoint", ck, "--task", "sts",
            "--data", str(sts), "--out-dir", str(out2),
        ) == 0
        report = json.loads((out2 / "report.json").read_text())
        assert -1.0 <= report["values"]["spearman"]["all"] <= 1.0

    def test_eval_workers_do_not_change_report(self, workspace, tmp_path):
        root = workspace["root"]
        task = workspace["task"]
        qp, cp, rp = self._write_retrieval_inputs(tmp_path, task.queries, task.corpus, task.qrels)
        blobs = []
        for workers, name in ((1, "ew1"), (8, "ew8")):
            out_dir = tmp_path / name
            assert run_cli(
                "eval",
                "--checkpoint", str(root / "run-pre" / "checkpoint.me5f"),
                "--task", "retrieval",
                "--queries", str(qp), "--corpus", str(cp), "--qrels", str(rp),
                "--out-dir", str(out_dir), "--workers", str(workers),
            ) == 0
            blobs.append((out_dir / "report.json").read_bytes())
        assert blobs[0] == blobs[1]


class TestReportCommand:
    def test_miracl_small_column_prints_published_average(self, tmp_path, capsys):
        values = [71.4, 68.2, 48.0, 51.2, 53.3, 73.3, 47.6, 55.2,
                  50.7, 63.6, 61.2, 59.1, 68.4, 81.3, 75.0, 45.9]
        sections = tmp_path / "sections.json"
        sections.write_text(json.dumps({"ndcg_small": values}))
        out_dir = tmp_path / "report-out"
        assert run_cli("report", "--sections", str(sections), "--out-dir", str(out_dir)) == 0
        printed = capsys.readouterr().out
        assert "rounded=60.8" in printed
        doc = json.loads((out_dir / "report.json").read_text())
        assert doc["section_means_rounded"]["ndcg_small"] == 60.8

    def test_bad_sections_document_exits_3(self, tmp_path):
        sections = tmp_path / "bad.json"
        sections.write_text(json.dumps([1, 2, 3]))
        assert run_cli("report", "--sections", str(sections), "--out-dir", str(tmp_path / "o")) == 3

    def test_missing_subcommand_exits_2(self):
        assert run_cli() == 2
