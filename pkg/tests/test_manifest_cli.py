"""Manifest parsing, config hashing, pipeline caching, sweep correlations."""

import csv
from pathlib import Path

import numpy as np
import pytest

from doss.cli import Pipeline, artifact_valid, sweep_correlation, write_meta
from doss.errors import ConfigError
from doss.manifest import load_manifest
from doss.model import load_checkpoint

TINY = """
[meta]
seed = 7

[model]
vocab_content = 12
d_model = 32
ffn_dim = 64
enc_layers = 1
dec_layers = 1
heads = 2
max_len = 20

[domain copy]
kind = copy
train_pairs = 120
eval_pairs = 16
min_len = 3
max_len = 5
seed = 11

[domain reverse]
kind = reverse
train_pairs = 120
eval_pairs = 16
min_len = 3
max_len = 5
seed = 22

[extension sort]
kind = sort
train_pairs = 120
eval_pairs = 16
min_len = 3
max_len = 5
seed = 44

[pretrain]
steps = 40

[masks]
alpha = 0.6
beta = 0.6
ft_epochs = 1

[doss]
steps = 24

[finetune]
steps = 12

[extend]
domain = sort
mode = new_only_disjoint
steps = 12

[eval]
max_decode_len = 7
batch_size = 32

[sweep]
alphas = 0.5
betas = 0.5
steps = 10
"""


@pytest.fixture()
def tiny_manifest(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY, encoding="utf-8")
    return path


def test_manifest_parsing(tiny_manifest):
    man = load_manifest(tiny_manifest)
    assert man.seed == 7
    assert man.model.vocab_size == 16
    assert [d.name for d in man.domains] == ["copy", "reverse"]
    assert man.extension.name == "sort"
    assert man.prune.alpha == 0.6 and man.prune.ft_epochs == 1
    assert man.train["pretrain"].max_steps == 40
    assert man.train["pretrain"].learning_rate == pytest.approx(2e-3)
    assert man.train["finetune"].dropout == pytest.approx(0.3)
    assert man.extend_mode == "new_only_disjoint"
    assert man.sweep_alphas == [0.5]


def test_manifest_stage_seeds_stable(tiny_manifest):
    a = load_manifest(tiny_manifest)
    b = load_manifest(tiny_manifest)
    for stage in ("pretrain", "train_doss", "eval"):
        assert a.stage_seed(stage) == b.stage_seed(stage)
    assert a.stage_seed("pretrain") != a.stage_seed("train_doss")


def test_manifest_stage_keys_depend_on_seed(tiny_manifest, tmp_path):
    a = load_manifest(tiny_manifest)
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("seed = 7", "seed = 8", 1), encoding="utf-8")
    b = load_manifest(other)
    assert a.stage_key("pretrain") != b.stage_key("pretrain")
    assert a.stage_key("pretrain") == load_manifest(tiny_manifest).stage_key("pretrain")


def test_manifest_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[meta]\nseed = 1\n[model]\nbogus_key = 3\n[domain a]\nkind = copy\n")
    with pytest.raises(ConfigError):
        load_manifest(bad)
    with pytest.raises(ConfigError):
        load_manifest(tmp_path / "missing.ini")
    nodomains = tmp_path / "nd.ini"
    nodomains.write_text("[meta]\nseed = 1\n")
    with pytest.raises(ConfigError):
        load_manifest(nodomains)
    dangling = tmp_path / "d.ini"
    dangling.write_text("[meta]\nseed = 1\n[domain a]\nkind = copy\n"
                        "[extend]\ndomain = ghost\nsteps = 5\n")
    with pytest.raises(ConfigError):
        load_manifest(dangling)


def test_artifact_meta_roundtrip(tmp_path):
    art = tmp_path / "x.bin"
    art.write_bytes(b"payload")
    write_meta(art, "k123", "stage", 5)
    assert artifact_valid(art, "k123")
    assert not artifact_valid(art, "other")
    art.write_bytes(b"tampered")
    assert not artifact_valid(art, "k123")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    man_path = out / "tiny.ini"
    man_path.write_text(TINY, encoding="utf-8")
    pipe = Pipeline(load_manifest(man_path), out / "run")
    pipe.run()
    return man_path, pipe


def test_pipeline_produces_artifacts(tiny_run):
    _, pipe = tiny_run
    store = load_checkpoint(pipe.base_ckpt)
    assert len(store) > 0
    assert pipe.mask_path("copy").exists()
    assert (pipe.out / "report.md").exists()
    ext = pipe.extend_dir("new_only_disjoint")
    assert (ext / "extended.ckpt").exists()
    # disjoint extension preserves old domains: the diff file is empty
    assert (ext / "preservation_diff.txt").read_bytes() == b""


def test_metrics_csv_monotone_steps(tiny_run):
    _, pipe = tiny_run
    with open(pipe.out / "pretrain_metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    assert steps == sorted(steps)
    assert steps[0] == 1 and steps[-1] == 40


def test_reports_embed_config_hash(tiny_run):
    _, pipe = tiny_run
    text = (pipe.out / "report.md").read_text()
    assert text.startswith("<!-- config_hash=")
    assert (pipe.out / "report.csv").read_text().startswith("# config_hash=")


def test_rerun_hits_cache_everywhere(tiny_run):
    man_path, pipe = tiny_run
    before = {p.name: p.read_bytes() for p in pipe.out.rglob("*") if p.is_file()}
    pipe2 = Pipeline(load_manifest(man_path), pipe.out)
    assert pipe2.pretrain() is False
    assert pipe2.make_masks() is False
    assert pipe2.train_doss() is False
    assert pipe2.finetune() is False
    assert pipe2.extend() is False
    assert pipe2.evaluate() is False
    after = {p.name: p.read_bytes() for p in pipe.out.rglob("*") if p.is_file()}
    assert before == after


def test_corrupted_artifact_reruns_only_its_stage(tiny_run):
    man_path, pipe = tiny_run
    base_bytes = pipe.base_ckpt.read_bytes()
    doss_bytes = pipe.doss_ckpt.read_bytes()
    raw = bytearray(doss_bytes)
    raw[-1] ^= 0xFF
    pipe.doss_ckpt.write_bytes(bytes(raw))
    pipe2 = Pipeline(load_manifest(man_path), pipe.out)
    assert pipe2.pretrain() is False          # upstream untouched
    assert pipe2.make_masks() is False
    assert pipe2.train_doss() is True         # producing stage reruns
    assert pipe.doss_ckpt.read_bytes() == doss_bytes  # bit-identical regeneration
    assert pipe2.evaluate() is False          # inputs identical again: cache hit
    assert pipe.base_ckpt.read_bytes() == base_bytes


def test_rerun_into_fresh_dir_is_bit_identical(tiny_run):
    man_path, pipe = tiny_run
    out2 = pipe.out.parent / "run_b"
    pipe2 = Pipeline(load_manifest(man_path), out2)
    pipe2.run()
    files1 = sorted(p.relative_to(pipe.out) for p in pipe.out.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(out2) for p in out2.rglob("*") if p.is_file())
    assert files1 == files2
    for rel in files1:
        assert (pipe.out / rel).read_bytes() == (out2 / rel).read_bytes(), rel


def test_disjoint_mask_stage_emits_zero_overlaps(tiny_run):
    man_path, pipe = tiny_run
    out2 = pipe.out.parent / "run_disjoint"
    pipe2 = Pipeline(load_manifest(man_path), out2)
    pipe2.pretrain()
    pipe2.make_masks(disjoint=True)
    stats = (out2 / "mask_stats.csv").read_text().splitlines()
    header = stats[1].split(",")
    for line in stats[2:]:
        row = dict(zip(header, line.split(",")))
        if row["domain_a"] != row["domain_b"]:
            assert row["shared_ones"] == "0"


def test_sweep_single_point_and_sorted_rows(tiny_run):
    man_path, pipe = tiny_run
    pipe2 = Pipeline(load_manifest(man_path), pipe.out)
    pipe2.sweep()
    lines = (pipe.out / "sweep.csv").read_text().splitlines()
    data = [l for l in lines if not l.startswith("#")][1:]
    assert len(data) == 1  # 1x1 grid -> a single row
    assert data[0].startswith("0.5,0.5,ok")


def test_sweep_rows_sorted_by_alpha_beta(tmp_path):
    text = TINY.replace("alphas = 0.5", "alphas = 0.6 0.4").replace(
        "betas = 0.5", "betas = 0.5").replace("steps = 10", "steps = 4")
    man_path = tmp_path / "m.ini"
    man_path.write_text(text, encoding="utf-8")
    pipe = Pipeline(load_manifest(man_path), tmp_path / "out")
    pipe.pretrain()
    pipe.sweep()
    lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    data = [l for l in lines if not l.startswith("#")][1:]
    pairs = [tuple(map(float, l.split(",")[:2])) for l in data]
    assert pairs == sorted(pairs)


def test_sweep_correlation_matches_reference_fixture():
    fixture = Path(__file__).parent / "fixtures" / "sweep_reference.csv"
    with open(fixture) as fh:
        rows = list(csv.DictReader(fh))
    alphas = [(float(r["alpha"]), float(r["avg_bleu"])) for r in rows]
    betas = [(float(r["beta"]), float(r["avg_bleu"])) for r in rows]
    assert sweep_correlation(alphas) == pytest.approx(-0.74, abs=0.05)
    assert sweep_correlation(betas) == pytest.approx(-0.54, abs=0.05)


def test_sweep_correlation_degenerate_is_nan():
    assert np.isnan(sweep_correlation([(0.5, 1.0), (0.5, 2.0)]))
    assert np.isnan(sweep_correlation([]))


def test_cli_main_smoke(tiny_manifest, tmp_path):
    from doss.cli import main

    rc = main(["pretrain", "--config", str(tiny_manifest),
               "--out", str(tmp_path / "o"), "--threads", "1"])
    assert rc == 0
    assert (tmp_path / "o" / "base.ckpt").exists()
    rc = main(["pretrain", "--config", str(tmp_path / "nope.ini"),
               "--out", str(tmp_path / "o2")])
    assert rc == 2
