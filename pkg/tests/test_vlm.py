import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bvqi.vlm import (
    CLIP,
    ClipAdapter,
    ClipConfig,
    FeatureCache,
    TextFeature,
    TokenizationError,
    decode_record,
    encode_record,
    init_weights,
    make_tiny_weights,
    weights_checksum,
)
from bvqi.vlm.cache import CacheFormatError

from conftest import GOLDEN


def _frames(n=2, seed=0):
    return np.random.default_rng(seed).random((n, 224, 224, 3), dtype=np.float32)


def test_text_shape_and_determinism(adapter):
    a = adapter.encode_text("a good photo")
    b = adapter.encode_text("a good photo")
    assert a.vector.shape == (adapter.config.embed_dim,)
    np.testing.assert_array_equal(a.vector, b.vector)


def test_text_pair_differs(adapter):
    g = adapter.encode_text("a good photo").vector
    b = adapter.encode_text("a bad photo").vector
    cos = g @ b / np.linalg.norm(g) / np.linalg.norm(b)
    assert cos < 1
    golden = np.load(GOLDEN / "vlm.npz")
    assert cos == pytest.approx(float(golden["good_bad_cosine"]), abs=1e-5)


def test_too_long_prompt(adapter):
    with pytest.raises(TokenizationError):
        adapter.encode_text("very " * 100 + "good")


def test_placeholder_is_one_token(adapter):
    ids = adapter.tokenizer.encode("a X good photo")
    assert len(ids) == 4
    assert adapter.tokenizer.encode("X") == [ids[1]]


def test_frame_shapes(adapter):
    f = adapter.encode_frames(_frames(3))
    d = adapter.config.embed_dim
    assert f.global_.shape == (3, d)
    assert f.local.shape == (3, 7, 7, d)
    assert f.raw.shape == (3, adapter.config.raw_dim, 7, 7)


def test_wrong_input_size(adapter):
    with pytest.raises(ValueError):
        adapter.encode_frames(np.zeros((1, 112, 112, 3), np.float32))


def test_constant_frame_deterministic(adapter):
    x = np.full((1, 224, 224, 3), 0.5, np.float32)
    a, b = adapter.encode_frames(x), adapter.encode_frames(x)
    np.testing.assert_array_equal(a.local, b.local)


def test_global_recomputed_from_raw(adapter):
    f = adapter.encode_frames(_frames(2, seed=5))
    np.testing.assert_allclose(adapter.pool_global(f.raw), f.global_, atol=1e-5)


def _manual_dense(pool, raw):
    """Per-position multi-head attention computed with plain tensor algebra."""
    n, c, h, w = raw.shape
    x = raw.flatten(2).permute(0, 2, 1)
    x = torch.cat([x.mean(1, keepdim=True), x], 1) + pool.positional_embedding[None]
    heads = pool.num_heads
    q = pool.q_proj(x) * (c // heads) ** -0.5
    k, v = pool.k_proj(x), pool.v_proj(x)
    split = lambda t: t.view(n, -1, heads, c // heads).transpose(1, 2)
    att = (split(q) @ split(k).transpose(-1, -2)).softmax(-1) @ split(v)
    out = pool.c_proj(att.transpose(1, 2).reshape(n, -1, c))
    return out[:, 0], out[:, 1:].reshape(n, h, w, -1)


def test_dense_pool_matches_manual_attention(adapter):
    f = adapter.encode_frames(_frames(2, seed=9))
    with torch.no_grad():
        g, loc = _manual_dense(adapter.model.visual.attnpool, torch.from_numpy(f.raw))
    np.testing.assert_allclose(g.numpy(), f.global_, atol=1e-5)
    np.testing.assert_allclose(loc.numpy(), f.local, atol=1e-5)


def test_matches_reference_implementation():
    from open_clip.model import build_model_from_openai_state_dict

    # the reference builder infers heads as width // 64, so use a compatible shape
    cfg = ClipConfig(embed_dim=64, vision_layers=(1, 1, 1, 1), vision_width=8, vision_heads=4,
                     transformer_width=64, transformer_heads=1, transformer_layers=1)
    model = init_weights(CLIP(cfg), 3).eval()
    sd = dict(model.state_dict())
    sd.update(input_resolution=torch.tensor(224), context_length=torch.tensor(77), vocab_size=torch.tensor(49408))
    ref = build_model_from_openai_state_dict(sd).float().eval()
    ref.load_state_dict(model.state_dict(), strict=False)  # undo the builder's half-precision rounding
    tok = ClipAdapter(model).tokenize("a high quality photo")[None]
    x = torch.from_numpy(_frames(2)).permute(0, 3, 1, 2)
    with torch.no_grad():
        np.testing.assert_allclose(model.encode_text(tok), ref.encode_text(tok), atol=1e-5)
        np.testing.assert_allclose(model.encode_image(x), ref.encode_image(x), atol=1e-4)


def test_golden_global_feature(adapter):
    golden = np.load(GOLDEN / "vlm.npz")
    f = adapter.encode_frames(golden["frame"][None])
    np.testing.assert_allclose(f.global_[0], golden["global"], atol=1e-5)


def test_context_init_identity(adapter):
    ctx = adapter.placeholder_embedding(1)
    with torch.no_grad():
        spliced = adapter.encode_text_with_context(ctx, "good").numpy()
    np.testing.assert_allclose(spliced, adapter.encode_text("a X good photo").vector, atol=1e-6)


def test_context_length_three_identity(adapter):
    with torch.no_grad():
        spliced = adapter.encode_text_with_context(adapter.placeholder_embedding(3), "high quality").numpy()
    np.testing.assert_allclose(spliced, adapter.encode_text("a X X X high quality photo").vector, atol=1e-6)


def test_zero_context_is_valid(adapter):
    with torch.no_grad():
        out = adapter.encode_text_with_context(torch.zeros(1, adapter.config.transformer_width), "good")
    TextFeature(out.numpy(), "zero context")


def test_gradient_reaches_only_context(adapter):
    before = adapter.encode_text("a good photo").vector.copy()
    checksum = adapter.weights_checksum
    ctx = torch.nn.Parameter(adapter.placeholder_embedding(1))
    opt = torch.optim.SGD([ctx], lr=10.0)
    out0 = adapter.encode_text_with_context(ctx, "good")
    out0.sum().backward()
    assert ctx.grad is not None and ctx.grad.abs().sum() > 0
    assert all(p.grad is None for p in adapter.model.parameters())
    opt.step()
    with torch.no_grad():
        out1 = adapter.encode_text_with_context(ctx, "good")
    assert not torch.allclose(out0.detach(), out1)
    np.testing.assert_array_equal(adapter.encode_text("a good photo").vector, before)
    assert weights_checksum(adapter.model) == checksum


def test_rn50_parameter_counts():
    m = CLIP(ClipConfig.rn50())
    visual = sum(p.numel() for p in m.visual.parameters())
    text = sum(p.numel() for p in m.transformer.parameters())
    assert m.token_embedding.weight.numel() == 25_296_896
    assert text == 37_828_608
    assert visual == 38_316_896


def test_weight_file_roundtrip(tmp_path):
    path = make_tiny_weights(tmp_path / "w.pt", seed=0)
    loaded = ClipAdapter.from_file(path)
    assert loaded.weights_checksum == ClipAdapter.random(seed=0).weights_checksum


def test_bare_state_dict_infers_config(tmp_path):
    # head counts of bare checkpoints follow the published width // 64 rule
    cfg = ClipConfig(embed_dim=64, vision_layers=(1, 2, 1, 1), vision_width=8, vision_heads=4,
                     transformer_width=64, transformer_heads=1, transformer_layers=2)
    model = init_weights(CLIP(cfg), 1)
    torch.save(model.state_dict(), tmp_path / "sd.pt")
    loaded = ClipAdapter.from_file(tmp_path / "sd.pt")
    assert loaded.config == cfg


def test_missing_weight_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ClipAdapter.from_file(tmp_path / "none.pt")


arrays = st.dictionaries(
    st.text(min_size=1, max_size=8),
    hnp.arrays(st.sampled_from([np.float32, np.float16, np.int64, np.uint8]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)),
    max_size=4,
)


@given(arrays)
@settings(max_examples=50)
def test_record_roundtrip(d):
    back = decode_record(encode_record(d))
    assert list(back) == list(d)
    for k in d:
        assert back[k].dtype == d[k].dtype
        np.testing.assert_array_equal(back[k], d[k])


def test_record_layout():
    blob = encode_record({"a": np.arange(3, dtype="<f4")})
    assert blob[:4] == b"BVQF"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    assert blob[-12:] == np.arange(3, dtype="<f4").tobytes()


def test_record_corruption():
    blob = encode_record({"a": np.zeros(10)})
    with pytest.raises(CacheFormatError):
        decode_record(b"XXXX" + blob[4:])
    with pytest.raises(CacheFormatError):
        decode_record(blob[:-5])


def test_feature_cache(tmp_path):
    cache = FeatureCache(tmp_path)
    key = "ab" * 32
    assert cache.get(key, "semantic", 0) is None
    cache.put(key, "semantic", 0, {"local": np.ones((7, 7, 4), np.float32)})
    assert (tmp_path / "ab" / key / "semantic" / "00000.bin").exists()
    np.testing.assert_array_equal(cache.get(key, "semantic", 0)["local"], 1)
    assert cache.get_all(key, "semantic", 2) is None


def test_cache_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("BVQI_CACHE_DIR", str(tmp_path / "c"))
    assert FeatureCache().root == tmp_path / "c"
