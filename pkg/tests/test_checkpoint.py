"""Container format and model round-trip checks."""

import numpy as np
import pytest

from marketrec.als import als_fit
from marketrec.checkpoint import (
    MAGIC,
    load_model,
    pack_text,
    pack_text_list,
    read_checkpoint,
    save_model,
    unpack_text,
    unpack_text_list,
    write_checkpoint,
)
from marketrec.content import (
    ItemContent,
    TextEncoder,
    WordEmbeddings,
    train_category_classifier,
    train_image_tower,
    train_word_embeddings,
)
from marketrec.events import Event, EventLog, build_interaction_matrix


def test_tensor_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {
        "a/matrix": rng.normal(size=(4, 7)),
        "b": rng.normal(size=13),
        "scalar": np.array(3.25),
        "cube": rng.normal(size=(2, 3, 4)),
    }
    path = str(tmp_path / "m.mrsys")
    write_checkpoint(path, tensors)
    back = read_checkpoint(path)
    assert set(back) == set(tensors)
    for name, arr in tensors.items():
        assert back[name].shape == np.asarray(arr).shape
        assert np.array_equal(back[name], arr)


def test_same_tensors_same_bytes(tmp_path):
    """Insertion order of the dict must not leak into the file."""
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=6)
    p1, p2 = str(tmp_path / "one.mrsys"), str(tmp_path / "two.mrsys")
    write_checkpoint(p1, {"x": a, "y": b})
    write_checkpoint(p2, {"y": b, "x": a})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_magic_bytes_lead_the_file(tmp_path):
    path = str(tmp_path / "m.mrsys")
    write_checkpoint(path, {"t": np.zeros(2)})
    assert open(path, "rb").read()[:6] == MAGIC


def test_wrong_magic_rejected(tmp_path):
    path = str(tmp_path / "bogus.mrsys")
    with open(path, "wb") as fh:
        fh.write(b"NOTME1" + b"\x00" * 30)
    with pytest.raises(ValueError, match="not an MRSYS1 container"):
        read_checkpoint(path)


def test_truncated_payload_reports_byte_counts(tmp_path):
    path = str(tmp_path / "m.mrsys")
    write_checkpoint(path, {"t": np.arange(10.0)})
    blob = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(blob[:-16])
    with pytest.raises(ValueError, match="truncated") as exc:
        read_checkpoint(path)
    assert "expected" in str(exc.value) and "remain" in str(exc.value)


def test_empty_name_rejected(tmp_path):
    with pytest.raises(ValueError, match="non-empty"):
        write_checkpoint(str(tmp_path / "m.mrsys"), {"": np.zeros(1)})


def test_text_packing_round_trip():
    for s in ["hello", "åäö ünïcode", "", "tab\tand\nnewline"]:
        assert unpack_text(pack_text(s)) == s
    values = ["item_1", "item_2", "weird åäö"]
    assert unpack_text_list(pack_text_list(values)) == values
    assert unpack_text_list(pack_text_list([])) == []


def _tiny_log():
    events = []
    for u in range(6):
        for i in range(4):
            if (u + i) % 2 == 0:
                events.append(Event(f"u{u}", f"i{i}", 100 + u * 10 + i, "click"))
    events.append(Event("u0", "i1", 500, "conversion"))
    return EventLog(events)


def test_factor_model_round_trip(tmp_path):
    model = als_fit(build_interaction_matrix(_tiny_log()), dim=4, iterations=3, seed=9)
    path = str(tmp_path / "als.mrsys")
    save_model(path, model)
    back = load_model(path)
    assert back.row_ids == model.row_ids
    assert back.col_ids == model.col_ids
    assert np.array_equal(back.row_factors, model.row_factors)
    assert np.array_equal(back.col_factors, model.col_factors)
    assert back.dim == model.dim and back.reg == model.reg and back.alpha == model.alpha
    assert back.objective_history == pytest.approx(model.objective_history)


def test_word_embeddings_round_trip(tmp_path):
    emb = train_word_embeddings([["red", "sofa"], ["red", "chair"]] * 10, dim=6, epochs=2, seed=1)
    path = str(tmp_path / "w.mrsys")
    save_model(path, emb)
    back = load_model(path)
    assert back.vocab == emb.vocab
    assert np.array_equal(back.vectors, emb.vectors)
    assert back.training_loss == pytest.approx(emb.training_loss)


ITEMS = [
    ItemContent("i1", "sofas", "1111", "blue velvet sofa"),
    ItemContent("i2", "sofas", "1111", "red fabric sofa couch"),
    ItemContent("i3", "bikes", "2222", "fast road bike"),
    ItemContent("i4", "bikes", "2222", "mountain bike wheels"),
]


def test_text_encoder_round_trip_preserves_outputs(tmp_path):
    corpus = [it.tokens() for it in ITEMS] * 5
    emb = train_word_embeddings(corpus, dim=8, epochs=2, seed=2)
    enc = train_category_classifier(ITEMS, emb, repr_dim=6, n_filters=4, epochs=2, seed=3)
    path = str(tmp_path / "text.mrsys")
    save_model(path, enc)
    back = load_model(path)
    assert isinstance(back, TextEncoder)
    for it in ITEMS:
        assert np.array_equal(back.representation(it), enc.representation(it))
        assert back.predict(it) == enc.predict(it)


def test_image_encoder_round_trip_preserves_outputs(tmp_path):
    rng = np.random.default_rng(4)
    items = [
        ItemContent(f"i{k}", "sofas", "1111", "blue sofa", image_feature=rng.normal(size=10))
        for k in range(8)
    ]
    emb = WordEmbeddings(
        vocab={"blue": 0, "sofa": 1}, vectors=rng.normal(size=(2, 6))
    )
    enc = train_image_tower(items, emb, hidden_dim=12, epochs=2, seed=5)
    path = str(tmp_path / "img.mrsys")
    save_model(path, enc)
    back = load_model(path)
    x = rng.normal(size=10)
    assert np.array_equal(back.encode(x), enc.encode(x))


def test_unknown_model_kind_rejected(tmp_path):
    path = str(tmp_path / "odd.mrsys")
    write_checkpoint(path, {"__text__/model_kind": pack_text("martian")})
    with pytest.raises(ValueError, match="unknown model kind"):
        load_model(path)


def test_container_without_kind_rejected(tmp_path):
    path = str(tmp_path / "plain.mrsys")
    write_checkpoint(path, {"t": np.zeros(3)})
    with pytest.raises(ValueError, match="no model kind"):
        load_model(path)


def test_unsupported_object_rejected(tmp_path):
    with pytest.raises(TypeError, match="no checkpoint serialization"):
        save_model(str(tmp_path / "x.mrsys"), {"not": "a model"})
