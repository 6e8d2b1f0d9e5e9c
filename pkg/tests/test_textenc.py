import numpy as np
import pytest

from scenedecomp.gradcore import Graph, backward, fd_check
from scenedecomp.textenc import (
    D_TEXT, SEQ_LEN, HandleError, HandleTable, TextEncoderParams, TokenizeError,
    Vocabulary, add_handle, detokenize, encode, tokenize,
)


@pytest.fixture
def world():
    vocab = Vocabulary()
    params = TextEncoderParams.init(vocab, np.random.default_rng(0))
    handles = HandleTable()
    for k in range(1, 6):
        add_handle(handles, f"[v{k}]", "object", vocab, params)
    return vocab, params, handles


def encoded(prompts, vocab, params, handles):
    g = Graph()
    nodes = {k: g.param(v, k) for k, v in params.arrays().items()}
    nodes["handles"] = g.param(handles.embeddings, "handles")
    ids = np.stack([tokenize(p, vocab, handles).ids for p in prompts])
    out = encode(g, ids, nodes, len(vocab), handles)
    return g, nodes, out


def test_tokenize_single_handle(world):
    vocab, _, handles = world
    tok = tokenize("a photo of [v1]", vocab, handles)
    assert tok.ids.shape == (SEQ_LEN,)
    assert list(tok.ids[:3]) == [vocab.id("a"), vocab.id("photo"), vocab.id("of")]
    assert tok.ids[3] == handles.handles[0].token_id
    assert (tok.ids[4:] == vocab.pad_id).all()
    assert tok.handle_positions == {"[v1]": 3}


def test_tokenize_empty_is_all_padding(world):
    vocab, _, handles = world
    assert (tokenize("", vocab, handles).ids == vocab.pad_id).all()


def test_tokenize_two_handle_positions(world):
    vocab, _, handles = world
    tok = tokenize("a photo of [v2] and [v5]", vocab, handles)
    assert tok.handle_positions == {"[v2]": 3, "[v5]": 5}


def test_unknown_word_named(world):
    vocab, _, handles = world
    with pytest.raises(TokenizeError, match="zeppelin"):
        tokenize("a photo of zeppelin", vocab, handles)


def test_unknown_handle_lists_available(world):
    vocab, _, handles = world
    with pytest.raises(HandleError, match=r"\[v1\]"):
        tokenize("a photo of [v9]", vocab, handles)


def test_prompt_too_long(world):
    vocab, _, handles = world
    with pytest.raises(TokenizeError):
        tokenize(" ".join(["a"] * (SEQ_LEN + 1)), vocab, handles)


def test_detokenize_round_trip(world):
    vocab, _, handles = world
    prompt = "a photo of [v3] and [v1] on the beach"
    tok = tokenize(prompt, vocab, handles)
    assert detokenize(tok.ids, vocab, handles) == prompt
    back = tokenize(detokenize(tok.ids, vocab, handles), vocab, handles)
    assert back.handle_positions == tok.handle_positions


def test_handle_ids_disjoint_from_lexicon(world):
    vocab, _, handles = world
    ids = [h.token_id for h in handles.handles]
    assert len(set(ids)) == len(ids)
    assert min(ids) >= len(vocab)


def test_add_handle_copies_initializer_row(world):
    vocab, params, handles = world
    np.testing.assert_array_equal(handles.embeddings[0], params.table[vocab.id("object")])
    handles.embeddings[0] += 1.0
    assert not np.array_equal(handles.embeddings[0], params.table[vocab.id("object")])


def test_duplicate_handle_rejected(world):
    vocab, params, handles = world
    with pytest.raises(HandleError, match="duplicate"):
        add_handle(handles, "[v1]", "object", vocab, params)


def test_unknown_initializer_rejected(world):
    vocab, params, handles = world
    with pytest.raises(HandleError, match="initializer"):
        add_handle(handles, "[v6]", "zeppelin", vocab, params)


def test_background_flag(world):
    vocab, params, handles = world
    add_handle(handles, "[vbg]", "background", vocab, params, background=True)
    assert handles.background_handles() == ["[vbg]"]


def test_padding_does_not_change_shared_rows(world):
    vocab, params, handles = world
    g, _, out = encoded(["a photo of [v1]", "a photo of [v1] on the beach"], vocab, params, handles)
    v = g.value(out)
    np.testing.assert_array_equal(v[0, :4], v[1, :4])


def test_zero_transform_is_identity(world):
    vocab, params, handles = world
    for w in (params.w2, params.b2):
        w[...] = 0.0
    g, _, out = encoded(["a photo of [v2]"], vocab, params, handles)
    v = g.value(out)[0]
    np.testing.assert_array_equal(v[0], params.table[vocab.id("a")])
    np.testing.assert_array_equal(v[3], handles.embeddings[1])


def test_handle_row_gradient_fd(world):
    vocab, params, handles = world
    handles.embeddings = handles.embeddings + np.random.default_rng(1).normal(0, 0.3, handles.embeddings.shape)
    g, nodes, out = encoded(["a photo of [v1] and [v2]"], vocab, params, handles)
    r = g.const(np.random.default_rng(2).standard_normal(g.value(out).shape))
    loss = g.sum(g.mul(out, r))
    assert fd_check(g, loss, nodes["handles"], 1e-5) < 1e-4


def test_gradient_routing(world):
    vocab, params, handles = world
    g, nodes, out = encoded(["a photo of [v2]"], vocab, params, handles)
    loss = g.sum(g.square(out))
    grads = backward(g, loss)
    gh = grads[nodes["handles"]]
    assert np.abs(gh[1]).sum() > 0
    assert np.abs(np.delete(gh, 1, axis=0)).sum() == 0
    gt = grads[nodes["text.table"]]
    assert np.abs(gt[vocab.id("photo")]).sum() > 0
    assert np.abs(gt[vocab.id("object")]).sum() == 0
    assert gh.shape == (5, D_TEXT)


def test_vocabulary_dense_ids():
    vocab = Vocabulary()
    assert [vocab.id(w) for w in vocab.words] == list(range(len(vocab)))
    assert vocab.next_free_id == len(vocab)
