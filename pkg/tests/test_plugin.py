import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plugtagger.diffcore import Tensor
from plugtagger.errors import (
    BadMagicError, ChecksumError, ContractError, HashMismatchError, ModeError, ShapeError, TruncatedError,
    VersionMismatchError,
)
from plugtagger.labelwords import BIO2, FLAT, LabelMap
from plugtagger.model import ModelConfig, encode, init_weights, lm_logits, model_to_bytes
from plugtagger.plugin import (
    EMBEDDING, LAYER, PluginPack, apply_labelword_deltas, init_plugin, inject_embedding, inject_layer, load_plugin,
    plugin_file_size, plugin_from_bytes, plugin_to_bytes, save_plugin,
)

CFG = ModelConfig(vocab_size=60, hidden=16, layers=2, heads=2, max_len=16, ffn_dim=32)
TOY = ModelConfig()


@pytest.fixture(scope="module")
def weights():
    return init_weights(CFG)


def trained_like(weights, mode=LAYER, l_p=3, seed=0):
    pack = init_plugin(CFG, mode, l_p, seed=seed, model_hash=weights.fingerprint(), task="ner")
    pack.label_map = LabelMap({"B-PER": 10, "I-PER": 11, "B-LOC": 12})
    rng = np.random.default_rng(seed)
    pack.deltas = {10: rng.normal(size=CFG.hidden).astype(np.float32), 12: rng.normal(size=CFG.hidden).astype(np.float32)}
    pack.validate()
    return pack


# --- init -------------------------------------------------------------------


def test_zero_length_pack_is_valid():
    pack = init_plugin(CFG, EMBEDDING, 0)
    assert pack.vectors.shape == (0, CFG.hidden)
    assert len(pack.label_map) == 0 and pack.deltas == {}


def test_same_seed_same_pack():
    assert init_plugin(CFG, LAYER, 4, seed=7) == init_plugin(CFG, LAYER, 4, seed=7)
    assert init_plugin(CFG, LAYER, 4, seed=7) != init_plugin(CFG, LAYER, 4, seed=8)


def test_toy_layer_shapes():
    pack = init_plugin(TOY, LAYER, 8)
    assert len(pack.vectors) == 4
    assert all(tk.shape == (8, 64) and tv.shape == (8, 64) for tk, tv in pack.vectors)


def test_init_scale():
    v = init_plugin(TOY, EMBEDDING, 500, seed=1).vectors
    assert abs(v.std() - 0.02) < 0.001 and abs(v.mean()) < 0.001


def test_init_errors():
    with pytest.raises(ContractError):
        init_plugin(CFG, LAYER, -1)
    with pytest.raises(ModeError):
        init_plugin(CFG, "prefix", 2)


def test_pack_invariants():
    with pytest.raises(ShapeError):
        PluginPack(LAYER, 2, 16, 2, [(np.zeros((2, 16)), np.zeros((2, 16)))])
    with pytest.raises(ContractError):
        PluginPack(EMBEDDING, 0, 16, 2, np.zeros((0, 16)), LabelMap({"B-X": 4}), {5: np.zeros(16)})


# --- injection ----------------------------------------------------------------


def test_inject_embedding_cases():
    x = np.arange(3 * CFG.hidden, dtype=np.float32).reshape(3, CFG.hidden)
    assert inject_embedding(x, init_plugin(CFG, EMBEDDING, 0)).data.tobytes() == x.tobytes()
    pack = init_plugin(CFG, EMBEDDING, 2, seed=1)
    out = inject_embedding(x, pack).data
    assert out.shape == (5, CFG.hidden)
    np.testing.assert_array_equal(out[:2], pack.vectors)
    np.testing.assert_array_equal(out[2:], x)
    only = inject_embedding(np.zeros((0, CFG.hidden), np.float32), pack).data
    np.testing.assert_array_equal(only, pack.vectors)


def test_inject_layer_cases():
    rng = np.random.default_rng(0)
    k = rng.normal(size=(3, CFG.hidden)).astype(np.float32)
    v = rng.normal(size=(3, CFG.hidden)).astype(np.float32)
    k0, v0 = inject_layer(k, v, init_plugin(CFG, LAYER, 0), 1)
    assert k0.data.tobytes() == k.tobytes() and v0.data.tobytes() == v.tobytes()
    pack = init_plugin(CFG, LAYER, 1, seed=3)
    kt, vt = inject_layer(k, v, pack, 2)
    np.testing.assert_array_equal(kt.data[0], pack.vectors[1][0][0])
    np.testing.assert_array_equal(vt.data[1:], v)


def test_inject_errors():
    x = np.zeros((2, CFG.hidden), np.float32)
    with pytest.raises(ModeError):
        inject_embedding(x, init_plugin(CFG, LAYER, 1))
    with pytest.raises(ModeError):
        inject_layer(x, x, init_plugin(CFG, EMBEDDING, 1), 1)
    with pytest.raises(ContractError):
        inject_layer(x, x, init_plugin(CFG, LAYER, 1), 3)
    with pytest.raises(ContractError):
        inject_layer(x, x, init_plugin(CFG, LAYER, 1), 0)


@pytest.mark.parametrize("mode", [EMBEDDING, LAYER])
def test_plugin_operations_leave_backbone_untouched(weights, mode):
    before = weights.content_hash()
    pack = trained_like(weights, mode)
    view = apply_labelword_deltas(weights, pack)
    encode(view, [4, 5, 6], pack)
    plugin_from_bytes(plugin_to_bytes(pack))
    assert weights.content_hash() == before


# --- label-word deltas --------------------------------------------------------


def test_empty_deltas_return_the_same_weights(weights):
    pack = init_plugin(CFG, LAYER, 1, model_hash=weights.fingerprint())
    assert apply_labelword_deltas(weights, pack) is weights


def test_one_delta_changes_one_row(weights):
    pack = init_plugin(CFG, LAYER, 1, model_hash=weights.fingerprint())
    pack.label_map = LabelMap({"B-X": 9})
    pack.deltas = {9: np.ones(CFG.hidden, np.float32)}
    view = apply_labelword_deltas(weights, pack)
    diff = np.nonzero((view.tok_emb != weights.tok_emb).any(axis=1))[0]
    assert list(diff) == [9]
    assert view.layers is weights.layers


def test_deltas_change_only_their_logit_columns(weights):
    pack = trained_like(weights)
    tokens = [4, 5, 6]
    h = encode(weights, tokens, pack).data
    plain = lm_logits(weights, h).data
    patched = lm_logits(apply_labelword_deltas(weights, pack), h).data
    changed = np.nonzero((plain != patched).any(axis=0))[0]
    assert sorted(changed) == sorted(pack.deltas)


def test_deltas_hash_checked(weights):
    other = init_weights(ModelConfig(vocab_size=60, hidden=16, layers=2, heads=2, max_len=16, ffn_dim=32, seed=9))
    with pytest.raises(HashMismatchError):
        apply_labelword_deltas(other, trained_like(weights))


# --- serialization ------------------------------------------------------------


@pytest.mark.parametrize("mode", [EMBEDDING, LAYER])
def test_round_trip(tmp_path, weights, mode):
    pack = trained_like(weights, mode)
    path = tmp_path / "p.ptpl"
    save_plugin(pack, path)
    again = load_plugin(path, weights)
    assert again == pack
    assert plugin_to_bytes(again) == path.read_bytes()


@settings(max_examples=30, deadline=None)
@given(
    mode=st.sampled_from([EMBEDDING, LAYER]),
    l_p=st.integers(0, 4),
    labels=st.dictionaries(st.text(min_size=1, max_size=6), st.integers(3, 59), max_size=5),
    flat=st.booleans(),
    seed=st.integers(-5, 2**31),
)
def test_round_trip_property(mode, l_p, labels, flat, seed):
    inv = {}
    for k, w in labels.items():
        inv.setdefault(w, k)
    entries = {k: w for w, k in inv.items()}
    lm = LabelMap(entries, FLAT if flat else BIO2) if "O" not in entries or flat else LabelMap({}, BIO2)
    pack = init_plugin(CFG, mode, l_p, seed=abs(seed) % 1000, task="tést")
    pack.meta.seed = seed
    pack.label_map = lm
    pack.deltas = {w: np.full(CFG.hidden, w / 7, np.float32) for w in list(lm.entries.values())[:2]}
    blob = plugin_to_bytes(pack)
    assert plugin_from_bytes(blob) == pack
    assert len(blob) == plugin_file_size(mode, l_p, CFG.hidden, CFG.layers, lm, len(pack.deltas), "tést")


def test_corrupt_payload_byte(weights):
    blob = bytearray(plugin_to_bytes(trained_like(weights)))
    blob[60] ^= 0xFF
    with pytest.raises(ChecksumError):
        plugin_from_bytes(bytes(blob))


def test_header_errors(weights):
    good = plugin_to_bytes(trained_like(weights))
    with pytest.raises(BadMagicError):
        plugin_from_bytes(b"PTMD" + good[4:])
    with pytest.raises(VersionMismatchError):
        plugin_from_bytes(good[:4] + (2).to_bytes(2, "little") + good[6:])
    with pytest.raises(TruncatedError):
        plugin_from_bytes(good[:-3])
    with pytest.raises(TruncatedError):
        plugin_from_bytes(good[:8])


def test_cross_model_load_is_refused(tmp_path, weights):
    path = tmp_path / "p.ptpl"
    save_plugin(trained_like(weights), path)
    other = init_weights(ModelConfig(vocab_size=60, hidden=16, layers=2, heads=2, max_len=16, ffn_dim=32, seed=1))
    with pytest.raises(HashMismatchError):
        load_plugin(path, other)
    with pytest.raises(HashMismatchError):
        encode(other, [4, 5], load_plugin(path))


def test_toy_file_size_is_small():
    lm = LabelMap({f"L{i}": 100 + i for i in range(10)}, FLAT)
    size = plugin_file_size(LAYER, 8, 64, 4, lm, 10, "ner")
    # header 39 + vectors 4*2*8*64*4 + map 6+10*(4+2+4) + deltas 4+10*(4+256) + meta 4+3+8
    assert size == 39 + 16384 + 106 + 2604 + 15
    model_bytes = len(model_to_bytes(init_weights(TOY)))
    assert size * 20 < model_bytes
