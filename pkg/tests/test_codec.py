import numpy as np
import pytest

from rnvc import codec as C
from rnvc import tensor as T
from rnvc.config import CodecConfig


def tiny_model(seed=0, width=8, channels=1, **kw):
    cfg = CodecConfig(width=width, channels=channels, **kw)
    return C.CodecModel(cfg, seed=seed)


def synth_frames(f, h, w, c=1, seed=0, motion=1.5):
    """Textured translating sequence with mild noise, in [0, 1]."""
    rng = np.random.default_rng(seed)
    canvas = rng.random((c, h + 32, w + 32)).astype(np.float32)
    # cheap smoothing so content is compressible
    for _ in range(2):
        canvas = 0.25 * (canvas + np.roll(canvas, 1, -1) + np.roll(canvas, 1, -2)
                         + np.roll(canvas, (1, 1), (-2, -1)))
    vx, vy = rng.uniform(-motion, motion, 2)
    out = np.empty((f, c, h, w), dtype=np.float32)
    for t in range(f):
        ox, oy = int(round(16 + t * vx)), int(round(16 + t * vy))
        out[t] = canvas[:, oy : oy + h, ox : ox + w]
        out[t] = np.clip(out[t] + 0.02 * rng.standard_normal((c, h, w)), 0, 1)
    return out


def plan_types(plan):
    return [(s.ftype, s.display) for s in plan]


def test_gop_plan_uni_20_frames_gop10():
    plan = C.gop_plan(20, C.GopStructure("uni", n=9))
    i_frames = [s.display for s in plan if s.ftype == "I"]
    assert i_frames == [0, 10]
    assert [s.display for s in plan] == list(range(20))


def test_gop_plan_single_frame():
    plan = C.gop_plan(1, C.GopStructure("uni", n=9))
    assert plan_types(plan) == [("I", 0)]


def test_gop_plan_bi_13_frames():
    # closing I lands on the last frame; 6 forward then 5 backward P-frames
    plan = C.gop_plan(13, C.GopStructure("bi", n=6, m=6))
    assert plan_types(plan) == [
        ("I", 0), ("P", 1), ("P", 2), ("P", 3), ("P", 4), ("P", 5), ("P", 6),
        ("I", 12), ("P", 11), ("P", 10), ("P", 9), ("P", 8), ("P", 7)]
    assert sorted(s.display for s in plan) == list(range(13))
    back = [s for s in plan if s.display == 11][0]
    assert back.new_chain and back.ref_display == 12


def test_gop_plan_bi_14_frames_is_symmetric():
    # with F = N+M+2 the layout is exactly [I, 6 fwd] + [I, 6 bwd]
    plan = C.gop_plan(14, C.GopStructure("bi", n=6, m=6))
    types = [s.ftype for s in plan]
    assert types == ["I"] + ["P"] * 6 + ["I"] + ["P"] * 6
    assert [s.display for s in plan] == [0, 1, 2, 3, 4, 5, 6, 13, 12, 11, 10, 9, 8, 7]


def test_gop_plan_bi_covers_long_sequences():
    for f in [1, 2, 7, 13, 14, 20, 26, 27, 40]:
        plan = C.gop_plan(f, C.GopStructure("bi", n=6, m=6))
        assert sorted(s.display for s in plan) == list(range(f))


def test_gop_validation():
    with pytest.raises(ValueError):
        C.GopStructure("tri", 1, 1)
    with pytest.raises(ValueError):
        C.GopStructure("uni", 3, 2)


def test_iframe_lossless_8bit_path():
    rng = np.random.default_rng(1)
    frame = (rng.integers(0, 256, size=(1, 1, 32, 32)) / 255.0).astype(np.float32)
    payload, recon, bits = C.code_iframe(frame, q=256)
    np.testing.assert_array_equal(recon, frame)
    out = C.decode_iframe(payload, 1, 32, 32)
    np.testing.assert_array_equal(out, recon)
    assert bits > 0


def test_iframe_quantization_error_bound():
    rng = np.random.default_rng(2)
    frame = rng.random((1, 1, 32, 32)).astype(np.float32)
    payload, recon, _ = C.code_iframe(frame, q=32)
    assert np.max(np.abs(recon - frame)) <= 1.0 / 62.0 + 1e-7
    out = C.decode_iframe(payload, 1, 32, 32)
    np.testing.assert_array_equal(out, recon)


def test_iframe_size_bounded_by_uniform_entropy():
    rng = np.random.default_rng(3)
    frame = rng.random((1, 1, 64, 64)).astype(np.float32)  # incompressible
    for q in (16, 64, 256):
        payload, _, _ = C.code_iframe(frame, q=q)
        bound = 64 * 64 * np.log2(q) / 8.0 + 64
        assert len(payload) <= bound


def encode_decode_roundtrip(model, frames, gop):
    blob, enc_stats = C.encode_video(model, frames, gop)
    dec_frames, dec_stats = C.decode_video(model, blob)
    return blob, enc_stats, dec_frames, dec_stats


@pytest.mark.parametrize("gop", [C.GopStructure("uni", n=4),
                                 C.GopStructure("bi", n=2, m=2)])
def test_codec_closure_small(gop):
    model = tiny_model(seed=5)
    frames = synth_frames(5, 64, 64, seed=6)
    blob, enc_stats, dec_frames, dec_stats = encode_decode_roundtrip(model, frames, gop)
    assert np.array_equal(dec_frames, enc_stats["recons"])
    assert enc_stats["state_hashes"] == dec_stats["state_hashes"]


def test_codec_closure_rgb():
    model = tiny_model(seed=7, channels=3)
    frames = synth_frames(4, 32, 32, c=3, seed=8)
    blob, enc_stats, dec_frames, dec_stats = encode_decode_roundtrip(
        model, frames, C.GopStructure("uni", n=6))
    assert np.array_equal(dec_frames, enc_stats["recons"])
    assert enc_stats["state_hashes"] == dec_stats["state_hashes"]


def test_rate_accounting_within_bound():
    model = tiny_model(seed=9)
    frames = synth_frames(5, 64, 64, seed=10)
    blob, stats = C.encode_video(model, frames, C.GopStructure("uni", n=6))
    ideal_bytes = stats["rate_bits_total"] / 8.0
    slack = 0.02 * ideal_bytes + 64.0
    assert abs(len(blob) - ideal_bytes) <= slack


def test_bitstream_determinism():
    model = tiny_model(seed=11)
    frames = synth_frames(4, 32, 32, seed=12)
    gop = C.GopStructure("uni", n=6)
    blob1, _ = C.encode_video(model, frames, gop)
    blob2, _ = C.encode_video(model, frames, gop)
    assert blob1 == blob2


def test_model_hash_mismatch_detected():
    model = tiny_model(seed=13)
    frames = synth_frames(3, 32, 32, seed=14)
    blob, _ = C.encode_video(model, frames, C.GopStructure("uni", n=6))
    other = tiny_model(seed=99)
    with pytest.raises(C.ModelMismatchError):
        C.decode_video(other, blob)


def test_truncated_stream_detected():
    model = tiny_model(seed=15)
    frames = synth_frames(3, 32, 32, seed=16)
    blob, _ = C.encode_video(model, frames, C.GopStructure("uni", n=6))
    with pytest.raises(C.BitstreamError):
        C.decode_video(model, blob[: len(blob) - 10])
    with pytest.raises(C.BitstreamError):
        C.decode_video(model, blob[:10])


def test_bad_magic_rejected():
    with pytest.raises(C.BitstreamError):
        C.parse_header(b"XXXX" + bytes(C.HEADER_SIZE))


def test_encode_rejects_bad_dims():
    model = tiny_model(seed=17)
    frames = np.zeros((3, 1, 40, 40), dtype=np.float32)
    with pytest.raises(C.BitstreamError):
        C.encode_video(model, frames, C.GopStructure("uni", n=6))


def test_header_fields_roundtrip():
    model = tiny_model(seed=18)
    frames = synth_frames(13, 32, 32, seed=19)
    gop = C.GopStructure("bi", n=6, m=6)
    blob, _ = C.encode_video(model, frames, gop, crop=(30, 28))
    head = C.parse_header(blob)
    assert head["frame_count"] == 13
    assert head["gop_mode"] == "bi" and head["gop_n"] == 6 and head["gop_m"] == 6
    assert (head["crop_w"], head["crop_h"]) == (30, 28)
    assert head["model_hash"] == model.model_hash()
    assert head["channels"] == 1


def test_first_p_after_reset_ignores_prereset_frames():
    # latents right after a state reset cannot depend on pre-reset content
    model = tiny_model(seed=20)
    gop = C.GopStructure("uni", n=2)  # I P P | I P P ...
    frames_a = synth_frames(5, 32, 32, seed=21)
    frames_b = frames_a.copy()
    frames_b[:3] = synth_frames(3, 32, 32, seed=22)  # different pre-reset GOP
    blob_a, stats_a = C.encode_video(model, frames_a, gop)
    blob_b, stats_b = C.encode_video(model, frames_b, gop)
    pa = [r for r in stats_a["frames"] if r["display"] == 4][0]
    pb = [r for r in stats_b["frames"] if r["display"] == 4][0]
    assert pa["rate_bits"] == pb["rate_bits"]
    na = np.array(stats_a["recons"][4])
    nb = np.array(stats_b["recons"][4])
    assert np.array_equal(na, nb)


def test_state_weights_roundtrip(tmp_path):
    model = tiny_model(seed=23)
    path = tmp_path / "model.rnvw"
    model.save(path)
    again = C.CodecModel.load(path, model.config)
    assert again.model_hash() == model.model_hash()
    frames = synth_frames(3, 32, 32, seed=24)
    gop = C.GopStructure("uni", n=6)
    blob1, _ = C.encode_video(model, frames, gop)
    blob2, _ = C.encode_video(again, frames, gop)
    assert blob1 == blob2
