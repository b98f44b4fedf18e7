import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from ringseq import geometry, models, nn
from ringseq.geometry import PatchSequence
from ringseq.models import IMAGE, ROP, SOP, SOS, VARIANTS, VOTE, CheckpointError, EncoderConfig

ENC = gradcases.SMALL_ENC


def _params(variant, seed=0, n_classes=3, hidden=4, enc=ENC):
    return models.init_params(variant, enc, n_classes, hidden, seed)


def _within_set_shuffle(seq, rng):
    return PatchSequence(SOS, seq.label, sets=[[s[k] for k in rng.permutation(len(s))] for s in seq.sets])


@pytest.mark.parametrize("variant", VARIANTS)
def test_pipeline_gradients(variant):
    rep = gradcases.pipeline(variant)
    assert rep.max_rel_error < 1e-4, rep.per_param


def test_pipeline_gradient_other_seed():
    assert gradcases.pipeline(SOS, seed=7).max_rel_error < 1e-4


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(patch_side=12)
    assert EncoderConfig().flat_dim(SOS) == 4 * 4 * 32
    assert EncoderConfig().flat_dim(IMAGE) == 4 * 4 * 32


def test_zero_weights_give_zero_features_and_bias_logits():
    p = _params(IMAGE)
    for k in p.tensors:
        p.tensors[k][...] = 0.0
    p.tensors["head.b"][:] = [0.5, -1.0, 2.0]
    img, seq = gradcases.small_sequence()
    assert not models.encode_patch(seq.sets[1][0], _zeroed(SOS)).any()
    assert np.array_equal(models.forward_image(img, p), [0.5, -1.0, 2.0])


def _zeroed(variant):
    p = _params(variant)
    for v in p.tensors.values():
        v[...] = 0.0
    return p


def test_encode_patch_deterministic_and_checked():
    _, seq = gradcases.small_sequence()
    p = _params(SOS)
    a = models.encode_patch(seq.sets[2][1], p)
    assert a.shape == (ENC.feature_dim,)
    assert a.tobytes() == models.encode_patch(seq.sets[2][1], p).tobytes()
    with pytest.raises(nn.ShapeError):
        models.encode_patch(np.zeros((16, 16, 3)), p)


def test_sos_k1_equals_single_patch_pipeline():
    _, full = gradcases.small_sequence()
    seq = PatchSequence(SOS, 0, sets=[full.sets[0][:1]])
    p = _params(SOS)
    f = models.encode_patch(seq.sets[0][0], p)
    h = nn.lstm_step(f, nn.LstmState.zeros(4), p["lstm.w"], p["lstm.b"]).h
    ref = h @ p["head.w"] + p["head.b"]
    assert np.allclose(models.forward_sos(seq, p), ref, rtol=0, atol=1e-15)
    sop = geometry.to_sop(seq)
    assert np.array_equal(models.forward_sop(sop, p), models.forward_sos(seq, p))


def test_sos_within_set_permutations_are_bit_identical():
    _, seq = gradcases.small_sequence(seed=2)
    rng = np.random.default_rng(0)
    for m in range(3):
        p = _params(SOS, seed=m)
        ref = models.forward_sos(seq, p).tobytes()
        for _ in range(20):
            assert models.forward_sos(_within_set_shuffle(seq, rng), p).tobytes() == ref


def test_sos_between_set_swap_witness():
    _, seq = gradcases.small_sequence(seed=3)
    p = _params(SOS, seed=1)
    swapped = PatchSequence(SOS, seq.label, sets=[seq.sets[2], seq.sets[1], seq.sets[0]])
    assert not np.allclose(models.forward_sos(seq, p), models.forward_sos(swapped, p))


def test_sop_order_witness():
    _, seq = gradcases.small_sequence(seed=3)
    sop = geometry.to_sop(seq)
    rev = PatchSequence(SOP, sop.label, flat=sop.flat[::-1])
    p = _params(SOP, seed=1)
    assert not np.allclose(models.forward_sop(sop, p), models.forward_sop(rev, p))
    assert models.forward_rop is models.forward_sop


def test_sos_rejects_empty_set():
    _, seq = gradcases.small_sequence()
    bad = PatchSequence(SOS, seq.label, sets=[seq.sets[0], [], seq.sets[2]])
    with pytest.raises(nn.ShapeError):
        models.forward_sos(bad, _params(SOS))


def _logits_for(preds, C=3):
    # row i has its largest logit at preds[i]
    return np.eye(C)[preds] * 5.0


def test_vote_rules():
    assert models.vote(_logits_for([0, 0, 1])) == 0
    assert models.vote(_logits_for([2, 2, 2, 2])) == 2
    # one vote each for classes 0 and 1; summed probability 0.9 vs 1.1
    probs = [[0.6, 0.4, 1e-300], [0.3, 0.7, 1e-300]]
    assert models.vote(np.log(probs)) == 1
    # identical mass: lower index wins
    assert models.vote(np.log([[0.6, 0.4], [0.4, 0.6]])) == 0


def test_forward_vote_per_patch():
    _, seq = gradcases.small_sequence()
    patches = seq.patches()
    p = _params(VOTE)
    logits, cls = models.forward_vote(patches, p)
    assert len(logits) == len(patches)
    assert cls == models.vote(np.stack(logits))
    one = models.forward_vote([patches[3]], p)[0][0]
    assert np.allclose(one, logits[3], rtol=0, atol=1e-14)


def test_softmax_shift_keeps_prediction():
    _, seq = gradcases.small_sequence()
    p = _params(SOS, seed=5)
    z = models.forward_sos(seq, p)
    q = p.copy()
    q.tensors["head.b"] += 3.25
    z2 = models.forward_sos(seq, q)
    assert np.abs(nn.softmax(z2) - nn.softmax(z)).max() < 1e-12
    assert np.argmax(z2) == np.argmax(z)


def test_init_params_contract():
    a, b = _params(SOS, seed=11), _params(SOS, seed=11)
    assert a.bit_equal(b)
    assert not a.bit_equal(_params(SOS, seed=12))
    assert (a["lstm.b"][4:8] == 1.0).all()
    assert not np.delete(a["lstm.b"], np.s_[4:8]).any()
    for name, w in a.tensors.items():
        if name.endswith(".w") and name != "lstm.w":
            fan_in, fan_out = (9 * w.shape[2], 9 * w.shape[3]) if w.ndim == 4 else w.shape
            assert np.abs(w).max() <= np.sqrt(6.0 / (fan_in + fan_out))
        elif name.endswith(".b") and name != "lstm.b":
            assert not w.any()
    lw = a["lstm.w"]
    assert np.abs(lw).max() <= np.sqrt(6.0 / (lw.shape[0] + lw.shape[1]))
    with pytest.raises(ValueError):
        models.init_params("CNN", ENC, 3)


def test_param_shapes_by_variant():
    for v in VARIANTS:
        names = set(models.param_shapes(v, ENC, 3, 4))
        assert ("lstm.w" in names) == (v in (SOS, SOP, ROP))
    assert _params(SOS).head_input_dim == 4 and _params(VOTE).head_input_dim == ENC.feature_dim


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_roundtrip(tmp_path, variant):
    p = _params(variant, seed=3)
    p.meta = {"K": 3, "arc_step": None, "n_min": 4, "classes": ["a", "b", "c"]}
    models.save_checkpoint(p, tmp_path / "m.ckpt")
    q = models.load_checkpoint(tmp_path / "m.ckpt")
    assert q.bit_equal(p)
    assert models.checkpoint_bytes(q) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_layout():
    p = _params(SOS)
    buf = models.checkpoint_bytes(p)
    assert buf[:4] == b"SOSM"
    version, hlen = struct.unpack("<IQ", buf[4:16])
    assert version == 1
    header = json.loads(buf[16:16 + hlen])
    assert header["lstm_gate_order"] == "ifgo"
    assert [t["name"] for t in header["tensors"]] == list(p.tensors)
    payload = buf[16 + hlen:]
    for t in header["tensors"]:
        arr = p[t["name"]]
        got = np.frombuffer(payload, "<f8", count=arr.size, offset=t["offset"]).reshape(t["shape"])
        assert got.tobytes() == arr.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(VARIANTS), st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_checkpoint_offsets_fuzz(variant, n_classes, hidden, seed):
    enc = EncoderConfig(patch_side=8, channels=1, conv_channels=(2, 2, 3), feature_dim=4, image_side=16)
    p = models.init_params(variant, enc, n_classes, hidden, seed)
    buf = models.checkpoint_bytes(p)
    hlen = struct.unpack("<Q", buf[8:16])[0]
    header = json.loads(buf[16:16 + hlen])
    offsets = [t["offset"] for t in header["tensors"]]
    sizes = [int(np.prod(t["shape"])) * 8 for t in header["tensors"]]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))
    assert len(buf) == 16 + hlen + sum(sizes)
    assert models.parse_checkpoint(buf).bit_equal(p)


def test_checkpoint_errors():
    buf = models.checkpoint_bytes(_params(SOP))
    with pytest.raises(CheckpointError):
        models.parse_checkpoint(buf[:-1])
    with pytest.raises(CheckpointError):
        models.parse_checkpoint(buf + b"\x00" * 8)
    with pytest.raises(CheckpointError):
        models.parse_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        models.parse_checkpoint(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(CheckpointError):
        models.parse_checkpoint(buf[:20])
    hlen = struct.unpack("<Q", buf[8:16])[0]
    header = json.loads(buf[16:16 + hlen])
    header["tensors"][1]["offset"] += 8
    h2 = json.dumps(header).encode()
    with pytest.raises(CheckpointError):
        models.parse_checkpoint(buf[:8] + struct.pack("<Q", len(h2)) + h2 + buf[16 + hlen:])
