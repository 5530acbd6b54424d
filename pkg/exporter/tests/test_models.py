import numpy as np
import pytest

from traceexport import ExportError, load_model, make_video
from traceexport.models import FRAME_DIM, MAX_VISUAL_ROWS, N_CTX


def test_loading_is_a_pure_function_of_the_name():
    a = load_model("toy-d16-l2")
    b = load_model("toy-d16-l2")
    assert np.array_equal(a.decoder.tok_emb, b.decoder.tok_emb)
    assert np.array_equal(a.decoder.head, b.decoder.head)
    for la, lb in zip(a.decoder.layers, b.decoder.layers):
        assert all(np.array_equal(la[k], lb[k]) for k in la)


def test_shallower_sibling_is_an_exact_truncation():
    deep = load_model("toy-d16-l3").decoder
    shallow = load_model("toy-d16-l1").decoder
    assert np.array_equal(deep.tok_emb, shallow.tok_emb)
    assert np.array_equal(deep.head, shallow.head)
    assert all(
        np.array_equal(deep.layers[0][k], shallow.layers[0][k]) for k in deep.layers[0]
    )
    # distinct widths stay unrelated
    other = load_model("toy-d32-l1").decoder
    assert other.tok_emb.shape != shallow.tok_emb.shape


@pytest.mark.parametrize(
    "name",
    ["gpt-4", "toy-d16", "toy-d16-l2-x", "toy-d2-l1", "toy-d512-l1", "toy-d16-l9"],
)
def test_bad_model_names_rejected(name):
    with pytest.raises(ExportError):
        load_model(name)


def test_forward_shapes_and_determinism():
    model = load_model("toy-d16-l2")
    rng = np.random.default_rng(5)
    embeds = rng.normal(size=(12, 16))
    h1, l1 = model.decoder.forward(embeds)
    h2, l2 = model.decoder.forward(embeds)
    assert h1.shape == (12, 16) and l1.shape == (12, 256)
    assert np.array_equal(h1, h2) and np.array_equal(l1, l2)


def test_forward_is_causal_bitwise():
    # perturbing position j must leave every output before j untouched,
    # not just approximately: masked attention weights are exactly zero
    model = load_model("toy-d16-l2")
    rng = np.random.default_rng(6)
    embeds = rng.normal(size=(10, 16))
    h_before, l_before = model.decoder.forward(embeds)
    changed = embeds.copy()
    changed[7:] += 1.0
    h_after, l_after = model.decoder.forward(changed)
    assert np.array_equal(h_before[:7], h_after[:7])
    assert np.array_equal(l_before[:7], l_after[:7])
    assert not np.array_equal(l_before[7:], l_after[7:])


def test_forward_rejects_oversized_sequences():
    model = load_model("toy-d8-l1")
    with pytest.raises(ExportError, match="context window"):
        model.decoder.forward(np.zeros((N_CTX + 1, 8)))


def test_projector_rows_shape_and_determinism():
    model = load_model("toy-d16-l1")
    frames = make_video(3, 4)
    rows = model.projector.rows(frames, 10)
    assert rows.shape == (10, 16)
    assert np.array_equal(rows, model.projector.rows(frames, 10))
    assert np.abs(rows).max() <= 1.0  # tanh output


def test_projector_input_validation():
    model = load_model("toy-d16-l1")
    with pytest.raises(ExportError, match="frames"):
        model.projector.rows(np.zeros((4, FRAME_DIM + 1)), 4)
    with pytest.raises(ExportError, match="l_v"):
        model.projector.rows(make_video(0, 2), MAX_VISUAL_ROWS + 1)


def test_make_video_seeded():
    assert np.array_equal(make_video(9, 3), make_video(9, 3))
    assert not np.array_equal(make_video(9, 3), make_video(10, 3))
    with pytest.raises(ExportError):
        make_video(0, 0)


def test_vocabulary_is_shared_across_the_family():
    wide = load_model("toy-d32-l2")
    narrow = load_model("toy-d8-l1")
    assert (wide.vocab_in, wide.vocab_out) == (narrow.vocab_in, narrow.vocab_out) == (258, 256)
