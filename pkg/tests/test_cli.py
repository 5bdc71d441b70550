import csv
import json
import os

import pytest

from conftest import tone
from pipmn import autodiff as ad
from pipmn import dsp
from pipmn.cli import main
from pipmn.config import ABLATIONS, RunConfig
from pipmn.model import load_checkpoint
from pipmn.train import RunLog


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def last_json(text):
    return json.loads([l for l in text.splitlines() if l.startswith("{")][-1])


@pytest.fixture
def gtzan_manifest(tmp_path):
    rows = ["clip_id,file_path,labels"]
    for i, (freq, label) in enumerate([(220, "blues"), (3000, "metal"), (260, "blues")]):
        dsp.write_wav(tmp_path / f"g{i}.wav", tone(30.0, freq, seed=i), dsp.SAMPLE_RATE)
        rows.append(f"g{i},g{i}.wav,{label}")
    p = tmp_path / "gtzan.csv"
    p.write_text("\n".join(rows) + "\n")
    return p


def write_config(path, **kw):
    base = dict(num_classes=2, epochs=2, batch_size=8, patience=1000)
    base.update(kw)
    path.write_text(json.dumps(base))
    return path


# --- features ------------------------------------------------------------------------

def test_features_cold_then_warm(capsys, gtzan_manifest, tmp_path):
    cache = tmp_path / "cache"
    code, out, _ = run(capsys, "features", "--manifest", gtzan_manifest, "--cache-dir", cache)
    assert code == 0 and "21 extracted, 0 cached" in out
    assert len([f for f in os.listdir(cache / "stack") if f.endswith(".pipf")]) == 21
    code, out, _ = run(capsys, "features", "--manifest", gtzan_manifest, "--cache-dir", cache)
    assert code == 0 and "0 extracted, 21 cached" in out


def test_features_missing_file_is_partial(capsys, gtzan_manifest, tmp_path):
    os.remove(tmp_path / "g1.wav")
    code, out, _ = run(capsys, "features", "--manifest", gtzan_manifest,
                       "--cache-dir", tmp_path / "c")
    assert code == 2
    assert "14 extracted" in out and "g1.wav" in out


def test_features_bad_manifest_is_invalid(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("clip_id,labels\na,b\n")
    code, _, err = run(capsys, "features", "--manifest", bad, "--cache-dir", tmp_path / "c")
    assert code == 1 and "missing columns" in err


def test_features_kind_flag(capsys, audio_corpus, tmp_path):
    code, _, _ = run(capsys, "features", "--manifest", audio_corpus, "--cache-dir",
                     tmp_path / "c", "--kind", "mfcc50", "--workers", "2")
    assert code == 0
    f = next(p for p in os.listdir(tmp_path / "c" / "mfcc50") if p.endswith(".pipf"))
    assert dsp.read_pipf(tmp_path / "c" / "mfcc50" / f).shape == (399, 50)


# --- train / eval / predict -------------------------------------------------------------

@pytest.fixture
def trained(capsys, audio_corpus, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", manifest=str(audio_corpus),
                       cache_dir=str(tmp_path / "cache"), epochs=3)
    out_dir = tmp_path / "run"
    code, out, err = run(capsys, "train", "--config", cfg, "--out", out_dir)
    assert code == 0, err
    return cfg, out_dir, out


def test_train_writes_artifacts(trained):
    cfg, out_dir, out = trained
    for name in ("checkpoint.pipc", "runlog.jsonl", "metrics.json", "config.json"):
        assert (out_dir / name).exists()
    assert "epochs run: 3" in out and "accuracy" in out
    log = RunLog.read(out_dir / "runlog.jsonl")
    assert [e["epoch"] for e in log.epochs] == [1, 2, 3]
    assert all("val_acc" in e for e in log.epochs)


def test_echoed_config_round_trips(trained):
    cfg, out_dir, _ = trained
    echoed = RunConfig.load(out_dir / "config.json")
    assert echoed == RunConfig.load(cfg)
    _, extra = load_checkpoint(out_dir / "checkpoint.pipc")
    assert RunConfig.from_dict(extra["run_config"]) == echoed


def test_same_seed_identical_runlog_files(capsys, trained, tmp_path):
    cfg, out_dir, _ = trained
    code, _, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / "again")
    assert code == 0
    assert (out_dir / "runlog.jsonl").read_bytes() == (tmp_path / "again" / "runlog.jsonl").read_bytes()
    assert (out_dir / "checkpoint.pipc").read_bytes() == (tmp_path / "again" / "checkpoint.pipc").read_bytes()


def test_eval_reproduces_stored_val_metrics(capsys, trained):
    _, out_dir, _ = trained
    code, out, _ = run(capsys, "eval", "--checkpoint", out_dir / "checkpoint.pipc", "--split", "val")
    assert code == 0
    _, extra = load_checkpoint(out_dir / "checkpoint.pipc")
    assert last_json(out)["metrics"] == extra["val_metrics"]
    stored = json.loads((out_dir / "metrics.json").read_text())["metrics"]
    assert stored == extra["val_metrics"]


def test_eval_test_split(capsys, trained):
    _, out_dir, _ = trained
    code, out, _ = run(capsys, "eval", "--checkpoint", out_dir / "checkpoint.pipc", "--split", "test")
    assert code == 0
    m = last_json(out)["metrics"]
    assert m["micro_f1"] == m["accuracy"]


def test_train_zero_epochs_is_init(capsys, audio_corpus, tmp_path):
    from pipmn.model import build_variant
    cfg = write_config(tmp_path / "cfg.json", manifest=str(audio_corpus),
                       cache_dir=str(tmp_path / "cache"))
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "z", "--epochs", "0")
    assert code == 0, err
    model, _ = load_checkpoint(tmp_path / "z" / "checkpoint.pipc")
    init = build_variant(RunConfig.load(cfg).model_config(), seed=0)
    for name, p in init.named_parameters().items():
        assert model.named_parameters()[name].data.tobytes() == p.data.tobytes()


@pytest.mark.parametrize("override,field", [
    ({"alpha": 0}, "alpha"), ({"in_dim": 50}, "in_dim"), ({"lr": "fast"}, "lr"),
    ({"bogus": 1}, "bogus"), ({"num_classes": 5}, "num_classes"),
])
def test_train_invalid_config_names_field(capsys, audio_corpus, tmp_path, override, field):
    cfg = write_config(tmp_path / "cfg.json", manifest=str(audio_corpus),
                       cache_dir=str(tmp_path / "cache"), **override)
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1
    assert field in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(capsys, audio_corpus, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", manifest=str(audio_corpus),
                       cache_dir=str(tmp_path / "cache"), lr=1e30, epochs=5)
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "o")
    assert code == 3 and "diverged" in err


def test_eval_empty_split_is_invalid(capsys, gtzan_manifest, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", manifest=str(gtzan_manifest),
                       cache_dir=str(tmp_path / "cache"), epochs=1)
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "o")
    assert code == 0, err
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "o" / "checkpoint.pipc",
                       "--split", "val")
    assert code == 1 and "empty" in err


def test_eval_missing_checkpoint(capsys, tmp_path):
    code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path / "nope.pipc")
    assert code == 1


def test_predict_thirty_seconds(capsys, trained, tmp_path):
    _, out_dir, _ = trained
    dsp.write_wav(tmp_path / "long.wav", tone(30.0, 500), dsp.SAMPLE_RATE)
    code, out, _ = run(capsys, "predict", "--checkpoint", out_dir / "checkpoint.pipc",
                       "--wav", tmp_path / "long.wav")
    assert code == 0
    segs = json.loads(out)["segments"]
    assert len(segs) == 7
    for s in segs:
        assert abs(sum(s["probabilities"].values()) - 1.0) < 1e-5
        assert s["label"] in ("high", "low")


def test_predict_unreadable_audio(capsys, trained, tmp_path):
    _, out_dir, _ = trained
    (tmp_path / "junk.wav").write_bytes(b"RIFFjunk")
    code, _, err = run(capsys, "predict", "--checkpoint", out_dir / "checkpoint.pipc",
                       "--wav", tmp_path / "junk.wav")
    assert code == 2 and "junk.wav" in err


# --- params ---------------------------------------------------------------------------

def test_params_base(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    assert last_json(out)["total"] == 1_375_797
    assert "1,375,797" in out


@pytest.mark.parametrize("flags,total", [
    (["--features", "mfcc50"], 348_297), (["--features", "mel100"], 1_375_797),
    (["--in-dim", "50"], 348_297), (["--num-classes", "20"], 1_375_797 + 4010),
])
def test_params_overrides(capsys, flags, total):
    code, out, _ = run(capsys, "params", *flags)
    assert code == 0 and last_json(out)["total"] == total


def test_params_minimal_config(capsys, tmp_path):
    cfg = write_config(tmp_path / "c.json", n=1, kappas=[1], num_classes=10)
    code, out, _ = run(capsys, "params", "--config", cfg)
    assert code == 0
    info = last_json(out)
    assert set(info["breakdown"]) == {"stage1", "head"}
    assert info["breakdown"]["head"] == 100 * 10 + 10
    assert info["total"] == sum(info["breakdown"].values())


def test_params_invalid_config(capsys, tmp_path):
    cfg = write_config(tmp_path / "c.json", kappas=[4])
    code, _, err = run(capsys, "params", "--config", cfg)
    assert code == 1 and "kappas" in err
    (tmp_path / "broken.json").write_text("{not json")
    code, _, _ = run(capsys, "params", "--config", tmp_path / "broken.json")
    assert code == 1


# --- gradcheck ------------------------------------------------------------------------

def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--size", "tiny")
    assert code == 0
    assert "PASS" in out and "worst" in out


def test_gradcheck_detects_corrupt_backward(capsys, monkeypatch):
    real = ad.make_op

    def broken(data, parents, grad_fn, op):
        if op == "layer_norm":
            return real(data, parents, lambda g: tuple(1.5 * v for v in grad_fn(g)), op)
        return real(data, parents, grad_fn, op)

    monkeypatch.setattr(ad, "make_op", broken)
    code, out, _ = run(capsys, "gradcheck")
    assert code == 2 and "FAIL" in out


def test_gradcheck_unknown_size(capsys):
    code, _, _ = run(capsys, "gradcheck", "--size", "huge")
    assert code == 1


# --- ablate ---------------------------------------------------------------------------

@pytest.mark.slow
def test_ablate_grid(capsys, audio_corpus, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", manifest=str(audio_corpus),
                       cache_dir=str(tmp_path / "cache"), epochs=1)
    out_dir = tmp_path / "abl"
    code, _, err = run(capsys, "ablate", "--config", cfg, "--out-dir", out_dir)
    assert code == 0, err
    with open(out_dir / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == list(ABLATIONS)
    assert all(r["status"] == "ok" for r in rows)
    base = RunConfig.load(cfg)
    for r in rows:
        vcfg = tmp_path / f"{r['variant']}.json"
        vcfg.write_text(base.variant(r["variant"]).to_json())
        code, out, _ = run(capsys, "params", "--config", vcfg)
        assert int(r["params"]) == last_json(out)["total"]
        for k in ("accuracy", "macro_precision", "macro_f1", "micro_f1"):
            assert 0.0 <= float(r[k]) <= 1.0
        assert r["micro_f1"] == r["accuracy"]
    model, _ = load_checkpoint(out_dir / "no_long_range_skip" / "checkpoint.pipc")
    assert not model.rhos
    assert not any(".rho" in n for n in model.named_parameters())


def test_ablate_records_failures(capsys, audio_corpus, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", manifest=str(audio_corpus),
                       cache_dir=str(tmp_path / "cache"), epochs=1,
                       ablation=["base", "no_linear_skip"])
    # corrupt one cached segment after the first variant's cache exists
    code, _, _ = run(capsys, "features", "--manifest", audio_corpus,
                     "--cache-dir", tmp_path / "cache")
    assert code == 0
    victim = sorted((tmp_path / "cache" / "stack").glob("*.pipf"))[0]
    victim.write_bytes(b"PIPF broken")
    code, out, _ = run(capsys, "ablate", "--config", cfg, "--out-dir", tmp_path / "abl")
    assert code == 2
    with open(tmp_path / "abl" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(r["status"].startswith("failed") for r in rows)


def test_verbose_flag(capsys):
    assert main(["-v", "params"]) == 0
    assert "1,375,797" in capsys.readouterr().out
