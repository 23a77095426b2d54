import json

import numpy as np
import pytest
import torch

from motionlang.checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                                   save_checkpoint, state_dict_arrays,
                                   load_state_dict_arrays)
from motionlang.config import (ConfigError, config_from_dict, config_to_dict,
                               resolve_config, write_resolved_config)
from motionlang.seeding import derive_seed


def make_ckpt():
    return Checkpoint(module="tokenizer", config={"a": 1, "nested": {"b": [1, 2]}},
                      arrays={"w": np.arange(6, dtype="<f4").reshape(2, 3),
                              "idx": np.array([3, 1], dtype="<i8")},
                      meta={"note": "x"}, corpus_stats_hash="ff")


def test_save_load_save_byte_identical(tmp_path):
    p1 = save_checkpoint(tmp_path / "a.ckpt", make_ckpt())
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_arrays_roundtrip_exact(tmp_path):
    ck = make_ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    for name in ck.arrays:
        assert np.array_equal(loaded.arrays[name], ck.arrays[name])
        assert loaded.arrays[name].dtype == ck.arrays[name].dtype


def test_module_tag_mismatch_rejected(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", make_ckpt())
    with pytest.raises(CheckpointError, match="module tag"):
        load_checkpoint(tmp_path / "a.ckpt", expect_module="alignment")


def test_version_mismatch_rejected(tmp_path):
    p = save_checkpoint(tmp_path / "a.ckpt", make_ckpt())
    raw = bytearray(p.read_bytes())
    raw[4] = 99  # corrupt the version field
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_state_dict_roundtrip():
    torch.manual_seed(0)
    m1 = torch.nn.Linear(3, 2)
    arrays = state_dict_arrays(m1)
    m2 = torch.nn.Linear(3, 2)
    load_state_dict_arrays(m2, arrays)
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(a, b)


# ---- config resolution ----


def test_empty_file_yields_complete_defaults(tmp_path):
    f = tmp_path / "cfg.json"
    f.write_text("")
    cfg = resolve_config(f)
    d = config_to_dict(cfg)
    # every section fully populated with defaults
    assert set(d) == {"seed", "out_dir", "verbosity", "corpus", "tokenizer", "alignment",
                      "t2m", "generator", "captioner", "evaluation"}
    assert d["tokenizer"]["codebook_size"] > 0
    path = write_resolved_config(cfg, tmp_path)
    echoed = json.loads(path.read_text())
    assert echoed["corpus"]["num_samples"] == d["corpus"]["num_samples"]


def test_override_generator_alpha():
    cfg = resolve_config(None, ["generator.alpha=2"])
    assert cfg.generator.alpha == 2


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="foo"):
        resolve_config(None, ["foo.bar=1"])
    with pytest.raises(ConfigError, match="corpus.bogus"):
        resolve_config(None, ["corpus.bogus=1"])


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError, match="type mismatch"):
        resolve_config(None, ['tokenizer.iterations="many"'])
    with pytest.raises(ConfigError, match="type mismatch"):
        config_from_dict({"seed": "abc"})


def test_stage_seeds_derived_from_global():
    a = resolve_config(None, seed=5)
    b = resolve_config(None, seed=5)
    c = resolve_config(None, seed=6)
    assert a.tokenizer.seed == b.tokenizer.seed == derive_seed(5, "train-vq")
    assert a.tokenizer.seed != c.tokenizer.seed
    assert a.tokenizer.seed != a.alignment.seed


def test_explicit_stage_seed_wins():
    cfg = resolve_config(None, ["tokenizer.seed=123"], seed=5)
    assert cfg.tokenizer.seed == 123


def test_tuple_field_coercion():
    cfg = resolve_config(None, ["corpus.length_range=[32, 48]"])
    assert cfg.corpus.length_range == (32, 48)
