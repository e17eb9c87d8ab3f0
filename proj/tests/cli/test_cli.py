"""Black-box checks of the somnlp command line: exit codes, JSON summaries,
config files, determinism and the annotation service."""

import filecmp
import json
import os
import signal
import subprocess
import tempfile
import unittest
import urllib.error
import urllib.request
from pathlib import Path

BIN = os.environ["SOMNLP_BIN"]
FIX = Path(os.environ["SOMNLP_FIXTURES"])


def run(*args, check=True):
    p = subprocess.run([BIN, "-q", *map(str, args)], capture_output=True, text=True)
    if check and p.returncode != 0:
        raise AssertionError(f"exit {p.returncode}: {p.stderr}")
    return p


def summary(*args):
    return json.loads(run(*args).stdout)


class Usage(unittest.TestCase):
    def test_help_for_every_subcommand(self):
        for cmd in (["corpus", "ingest"], ["corpus", "stats"], ["tokenizer", "train"], ["tokenizer", "encode"],
                    ["mlm", "sample"], ["pretrain"], ["finetune"], ["evaluate"], ["report"],
                    ["annotate", "serve"], ["annotate", "resolve"], ["annotate", "export"]):
            p = run(*cmd, "--help", check=False)
            self.assertEqual(p.returncode, 0, cmd)
            self.assertIn("--", p.stdout)

    def test_usage_errors_exit_2(self):
        self.assertEqual(run(check=False).returncode, 2)
        self.assertEqual(run("frobnicate", check=False).returncode, 2)
        self.assertEqual(run("corpus", "ingest", "--bogus", check=False).returncode, 2)
        self.assertEqual(run("pretrain", check=False).returncode, 2)  # missing required flags

    def test_runtime_errors_exit_1_with_module(self):
        with tempfile.TemporaryDirectory() as d:
            bad = Path(d) / "bad.jsonl"
            bad.write_text('{"id": "a"}\n')
            p = run("corpus", "ingest", "-i", bad, "-o", Path(d) / "out.jsonl", check=False)
            self.assertEqual(p.returncode, 1)
            self.assertIn("corpus:", p.stderr)


class Corpus(unittest.TestCase):
    def test_stats_on_empty_dir(self):
        with tempfile.TemporaryDirectory() as d:
            j = summary("corpus", "stats", "-i", d)
        self.assertEqual(j["items"], 0)
        self.assertEqual(j["tokens"], 0)
        self.assertEqual(j["sources"], [])

    def test_ingest_reports_per_source_growth(self):
        with tempfile.TemporaryDirectory() as d:
            j = summary("corpus", "ingest", "-i", FIX / "raw", "-o", Path(d) / "c.jsonl")
            lines = (Path(d) / "c.jsonl").read_text().splitlines()
        self.assertEqual(len(lines), j["documents"])
        growth = [s["cumulative_unique_words"] for s in j["sources"]]
        self.assertEqual(growth, sorted(growth))
        self.assertEqual(growth[-1], j["stats"]["unique_words"])


class Pipeline(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.d = Path(cls.tmp.name)
        run("corpus", "ingest", "-i", FIX / "raw", "-o", cls.d / "corpus.jsonl")
        run("tokenizer", "train", "-c", cls.d / "corpus.jsonl", "-o", cls.d / "vocab.txt", "--vocab-size", 600)
        run("tokenizer", "train", "-c", FIX / "text" / "pretrain_50.txt", "-o", cls.d / "other_vocab.txt",
            "--vocab-size", 300)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def pretrain(self, out, *extra):
        return summary("pretrain", "-c", self.d / "corpus.jsonl", "-v", self.d / "vocab.txt", "-o", out,
                       "--preset", "tiny", "--max-positions", 32, "--max-len", 24, "--steps", 10, *extra)

    def test_same_seed_gives_identical_artifacts(self):
        a, b = self.d / "a.bin", self.d / "b.bin"
        self.pretrain(a, "--log-out", self.d / "a.log")
        self.pretrain(b, "--log-out", self.d / "b.log")
        self.assertTrue(filecmp.cmp(a, b, shallow=False))
        self.assertTrue(filecmp.cmp(self.d / "a.log", self.d / "b.log", shallow=False))
        c = self.d / "c.bin"
        summary("--seed", 7, "pretrain", "-c", self.d / "corpus.jsonl", "-v", self.d / "vocab.txt", "-o", c,
                "--preset", "tiny", "--max-positions", 32, "--max-len", 24, "--steps", 10)
        self.assertFalse(filecmp.cmp(a, c, shallow=False))

    def test_toml_and_json_config_agree_and_flags_win(self):
        toml = self.d / "cfg.toml"
        toml.write_text('seed = 5\n[pretrain]\npreset = "tiny"\nmax-positions = 32\nmax-len = 24\nsteps = 4\n')
        cfg_json = self.d / "cfg.json"
        cfg_json.write_text(json.dumps({"seed": 5, "pretrain": {"preset": "tiny", "max-positions": 32,
                                                                 "max-len": 24, "steps": 4}}))
        outs = []
        for cfg in (toml, cfg_json):
            out = self.d / (cfg.suffix[1:] + ".bin")
            j = summary("--config", cfg, "pretrain", "-c", self.d / "corpus.jsonl", "-v", self.d / "vocab.txt",
                        "-o", out)
            self.assertEqual(j["steps"], 4)
            self.assertEqual(j["config"]["hidden"], 8)
            outs.append(out)
        self.assertTrue(filecmp.cmp(*outs, shallow=False))
        j = summary("--config", toml, "pretrain", "-c", self.d / "corpus.jsonl", "-v", self.d / "vocab.txt",
                    "-o", self.d / "flag.bin", "--steps", 2)
        self.assertEqual(j["steps"], 2)

    def test_finetune_evaluate_and_fingerprint_mismatch(self):
        enc = self.d / "enc.bin"
        self.pretrain(enc)
        model = self.d / "fake.bin"
        j = summary("finetune", "-m", enc, "-v", self.d / "vocab.txt", "--train", FIX / "datasets" / "separable32.jsonl",
                    "-o", model, "--lr", 1e-2, "--epochs", 3, "--max-len", 24)
        self.assertEqual(j["task"]["kind"], "binary")
        self.assertEqual(j["metric_on"], "train")
        self.assertEqual(len(j["history"]), 3)
        m = summary("evaluate", "-m", model, "-v", self.d / "vocab.txt", "-d", FIX / "datasets" / "separable32.jsonl",
                    "--max-len", 24)
        self.assertEqual(m["examples"], 32)
        self.assertAlmostEqual(m["micro"]["f1"], m["accuracy"])
        p = run("evaluate", "-m", model, "-v", self.d / "other_vocab.txt", "-d",
                FIX / "datasets" / "separable32.jsonl", check=False)
        self.assertEqual(p.returncode, 1)
        self.assertIn("fingerprint mismatch", p.stderr)
        p = run("finetune", "-m", enc, "-v", self.d / "other_vocab.txt", "--train",
                FIX / "datasets" / "separable32.jsonl", "-o", self.d / "x.bin", check=False)
        self.assertEqual(p.returncode, 1)
        self.assertIn("fingerprint mismatch", p.stderr)


class Report(unittest.TestCase):
    def test_csv_table_round_trip(self):
        with tempfile.TemporaryDirectory() as d:
            csv = Path(d) / "t.csv"
            csv.write_text("model,size,A,B,Average\nm1,1M,90,80,85\nm2,2M,70,95,82.5\n")
            j = summary("report", "--table", csv, "--format", "markdown", "-o", Path(d) / "t.md")
            md = (Path(d) / "t.md").read_text()
        self.assertEqual([r["average"] for r in j["rows"]], [85.0, 82.5])
        self.assertIn("**90.00**", md)
        self.assertIn("**95.00**", md)


class Annotate(unittest.TestCase):
    def test_resolve_and_export_fixture(self):
        items, log = FIX / "campaign" / "items.jsonl", FIX / "campaign" / "records.jsonl"
        j = summary("annotate", "resolve", "--items", items, "--log", log)
        self.assertEqual((j["retained"], j["discarded"], j["incomplete"]), (7, 3, 0))
        with tempfile.TemporaryDirectory() as d:
            e = summary("annotate", "export", "--items", items, "--log", log, "--task", "toxicity", "-o", d)
            self.assertEqual(e["files"]["toxicity"]["examples"], 4)
            self.assertEqual(e["files"]["toxicity_multilabel"]["examples"], 3)
            got = [json.loads(l) for l in (Path(d) / "toxicity_multilabel.jsonl").read_text().splitlines()]
            want = [json.loads(l) for l in (FIX / "campaign" / "expected_toxicity_multilabel.jsonl").read_text().splitlines()]
            self.assertEqual(got, want)

    def test_serve_round_trip_and_restart(self):
        with tempfile.TemporaryDirectory() as d:
            log = Path(d) / "log.jsonl"

            def start():
                p = subprocess.Popen([BIN, "-q", "annotate", "serve", "--items", FIX / "campaign" / "items.jsonl",
                                      "--annotators", "amina", "bashir", "--log", log, "--port", "0"],
                                     stdout=subprocess.PIPE, text=True)
                first = ""
                while not first.rstrip().endswith("}"):
                    first += p.stdout.readline()
                return p, json.loads(first)["port"]

            def call(port, method, path, body=None):
                req = urllib.request.Request(f"http://127.0.0.1:{port}{path}", method=method,
                                             data=None if body is None else json.dumps(body).encode(),
                                             headers={"Content-Type": "application/json"})
                try:
                    with urllib.request.urlopen(req, timeout=10) as r:
                        return r.status, r.read().decode()
                except urllib.error.HTTPError as e:
                    return e.code, e.read().decode()

            p, port = start()
            try:
                status, body = call(port, "GET", "/items/next?annotator=amina")
                self.assertEqual((status, json.loads(body)["id"]), (200, "item-01"))
                rec = {"item_id": "item-01", "annotator_id": "amina", "stage1": "fake"}
                self.assertEqual(call(port, "POST", "/labels", rec)[0], 201)
                self.assertEqual(call(port, "POST", "/labels", rec)[0], 409)
                bad = {"item_id": "item-07", "annotator_id": "amina", "stage1": "non-toxic", "stage2": ["insult"]}
                self.assertEqual(call(port, "POST", "/labels", bad)[0], 422)
                self.assertEqual(call(port, "GET", "/items/next?annotator=nobody")[0], 404)
            finally:
                p.send_signal(signal.SIGTERM)
                self.assertEqual(p.wait(timeout=10), 0)
                p.stdout.close()
            # A restarted service resumes from the log.
            p, port = start()
            try:
                status, body = call(port, "GET", "/items/next?annotator=amina")
                self.assertEqual(json.loads(body)["id"], "item-02")
                progress = json.loads(call(port, "GET", "/progress")[1])
                self.assertEqual(progress["annotators"]["amina"]["labeled"], 1)
            finally:
                p.send_signal(signal.SIGINT)
                self.assertEqual(p.wait(timeout=10), 0)
                p.stdout.close()


if __name__ == "__main__":
    unittest.main(verbosity=2)
