import json
import re

import pytest

from plugtagger.cli import main, read_config
from plugtagger.data import parse_conll
from plugtagger.errors import UsageError
from plugtagger.model import load_model

TINY = ["--hidden", "16", "--layers", "1", "--heads", "2", "--ffn-dim", "32", "--max-len", "48", "--batch-size", "8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Data, a tiny backbone, an NER label map and a one-epoch plugin, all built through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out-dir", str(d), "--sizes", "80,20,20", "--corpus-size", "300"]) == 0
    model = d / "m.ptmd"
    assert main(["pretrain", "--corpus", str(d / "corpus.txt"), "--vocab-extra", str(d / "ner.train.conll"),
                 "--out", str(model), "--steps", "40", *TINY]) == 0
    amap = d / "ner.map"
    assert main(["select-labelwords", "--model", str(model), "--train", str(d / "ner.train.conll"), "--out", str(amap),
                 "--no-generic-filter"]) == 0
    plugin = d / "ner.ptpl"
    assert main(["train", "--model", str(model), "--train", str(d / "ner.train.conll"), "--map", str(amap),
                 "--out", str(plugin), "--epochs", "1", "--lp", "2", "--task", "ner"]) == 0
    return d, model, amap, plugin


def test_gen_data_outputs(pipeline):
    d = pipeline[0]
    for task in ("ner", "pos", "chunk"):
        for split in ("train", "dev", "test"):
            assert (d / f"{task}.{split}.conll").exists()
    assert len(parse_conll(d / "ner.train.conll")) == 80
    manifest = json.loads((d / "corpus.txt.manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seeds"] == {"seed": 0}
    assert set(manifest) >= {"config", "inputs", "outputs", "version", "wall_clock_s"}


def test_pretrain_is_reproducible(pipeline, tmp_path, capsys):
    d, model = pipeline[:2]
    again = tmp_path / "m2.ptmd"
    code, out, _ = run(capsys, "pretrain", "--corpus", d / "corpus.txt", "--vocab-extra", d / "ner.train.conll",
                       "--out", again, "--steps", "40", *TINY)
    assert code == 0 and out.startswith("model ")
    assert again.read_bytes() == model.read_bytes()


def test_missing_corpus_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--corpus", tmp_path / "nope.txt", "--out", tmp_path / "m.ptmd")
    assert code == 2 and "error:" in err


def test_bad_flags_are_usage_errors(capsys):
    assert run(capsys, "train", "--lp", "x")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1


def test_select_is_deterministic(pipeline, tmp_path, capsys):
    d, model, amap, _ = pipeline
    again = tmp_path / "again.map"
    code, out, _ = run(capsys, "select-labelwords", "--model", model, "--train", d / "ner.train.conll", "--out", again,
                       "--no-generic-filter")
    assert code == 0
    assert again.read_bytes() == amap.read_bytes()
    labels = {line.split("\t")[0] for line in out.splitlines()}
    assert labels >= {"B-PER", "I-PER"} and "O" not in labels


def test_train_writes_plugin_and_manifest(pipeline):
    plugin = pipeline[3]
    manifest = json.loads(plugin.with_name("ner.ptpl.manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["lp"] == 2


def test_tag_text_format(pipeline, capsys):
    _, model, _, plugin = pipeline
    code, out, _ = run(capsys, "tag", "--model", model, "--plugin", plugin, "--text", "Olivia likes apple")
    assert code == 0
    assert re.fullmatch(r"Olivia \S+ / likes \S+ / apple \S+\n", out)


def test_tag_decode_must_match(pipeline, capsys):
    _, model, _, plugin = pipeline
    assert run(capsys, "tag", "--model", model, "--plugin", plugin, "--text", "a", "--decode", "greedy")[0] == 1
    assert run(capsys, "tag", "--model", model, "--plugin", plugin)[0] == 1


def test_tag_file_then_eval(pipeline, tmp_path, capsys):
    d, model, _, plugin = pipeline
    out = tmp_path / "pred.conll"
    assert run(capsys, "tag", "--model", model, "--plugin", plugin, "--input", d / "ner.test.conll",
               "--input-format", "conll", "--out", out)[0] == 0
    assert len(parse_conll(out)) == 20
    code, text, _ = run(capsys, "eval", "--pred", out, "--gold", d / "ner.test.conll")
    assert code == 0 and re.search(r"^F1 \d\.\d{4}$", text, re.M)


def test_eval_gold_against_itself(pipeline, capsys):
    d = pipeline[0]
    code, out, _ = run(capsys, "eval", "--pred", d / "ner.test.conll", "--gold", d / "ner.test.conll")
    assert code == 0 and "F1 1.0000" in out
    code, out, _ = run(capsys, "eval", "--pred", d / "pos.test.conll", "--gold", d / "pos.test.conll")
    assert out.strip() == "accuracy 1.0000"


def test_eval_mismatched_files(pipeline, capsys):
    d = pipeline[0]
    assert run(capsys, "eval", "--pred", d / "ner.dev.conll", "--gold", d / "ner.test.conll")[0] == 2


def test_cross_model_plugin_is_contract_error(pipeline, tmp_path, capsys):
    d, _, _, plugin = pipeline
    other = tmp_path / "o.ptmd"
    main(["pretrain", "--corpus", str(d / "corpus.txt"), "--out", str(other), "--steps", "5", "--seed", "3", *TINY])
    capsys.readouterr()
    assert run(capsys, "tag", "--model", other, "--plugin", plugin, "--text", "a")[0] == 3


def test_bench_csv_schema(pipeline, tmp_path, capsys):
    d, model, _, plugin = pipeline
    csv_path = tmp_path / "ratio.csv"
    code, out, err = run(capsys, "bench-switch", "--model", model, "--plugin", f"ner={plugin}",
                         "--data", f"ner={d / 'ner.test.conll'}", "--counts", "2,4", "--reload-delay", "0.001",
                         "--out", csv_path, "--trace", tmp_path / "trace.json")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "n_per_task,model_switch_s,plugin_switch_s,ratio"
    assert [l.split(",")[0] for l in lines[1:]] == ["2", "4"]
    assert csv_path.read_text() == out
    assert "slope" in err
    trace = json.loads((tmp_path / "trace.json").read_text())
    assert trace["model"]["switches"] == 0


def test_bench_needs_matching_tasks(pipeline, capsys):
    d, model, _, plugin = pipeline
    assert run(capsys, "bench-switch", "--model", model, "--plugin", f"ner={plugin}")[0] == 1


def test_config_file_supplies_and_is_overridden(pipeline, tmp_path, capsys):
    d, model, amap, _ = pipeline
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"# tiny run\nmodel = {model}\ntrain = {d / 'ner.train.conll'}\nmap = {amap}\n"
                   f"out = {tmp_path / 'a.ptpl'}\nepochs = 1\nlp = 5\n")
    code, _, _ = run(capsys, "train", "--config", cfg, "--lp", "1")
    assert code == 0
    manifest = json.loads((tmp_path / "a.ptpl.manifest.json").read_text())
    assert manifest["config"]["lp"] == 1 and manifest["config"]["epochs"] == 1


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert run(capsys, "eval", "--config", cfg, "--pred", "a", "--gold", "b")[0] == 1


def test_read_config_syntax(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\n\nbatch-size = 4\nlr=0.5\n")
    assert read_config(cfg) == {"batch_size": "4", "lr": "0.5"}
    cfg.write_text("no equals sign\n")
    with pytest.raises(UsageError):
        read_config(cfg)


def test_pretrained_model_carries_vocab(pipeline):
    weights, tokens = load_model(pipeline[1])
    assert "Olivia" in tokens and weights.config.vocab_size == len(tokens)
