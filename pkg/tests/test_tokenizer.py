import pytest
from hypothesis import given
from hypothesis import strategies as st

from matryoshka3d.errors import ParameterError
from matryoshka3d.tokenizer import BOS, EOS, VocabSpec, encode, fnv1a_64


def test_fnv_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_empty_text():
    assert encode("", VocabSpec(), 8) == [BOS, EOS]


def test_repeated_word_shares_id():
    ids = encode("a b a", VocabSpec(), 8)
    assert ids[1] == ids[3] and ids[1] != ids[2]


def test_truncation_keeps_head_and_eos():
    ids = encode("w1 w2 w3 w4 w5", VocabSpec(), 4)
    assert ids == encode("w1 w2", VocabSpec(), 4)
    assert len(ids) == 4 and ids[-1] == EOS


def test_invalid_specs():
    with pytest.raises(ParameterError):
        VocabSpec(7)
    with pytest.raises(ParameterError):
        encode("x", VocabSpec(), 1)


@given(st.text(max_size=200), st.integers(8, 5000), st.integers(2, 40))
def test_encode_properties(text, v, max_len):
    spec = VocabSpec(v)
    ids = encode(text, spec, max_len)
    assert ids == encode(text, spec, max_len)
    assert ids[0] == BOS and ids[-1] == EOS
    assert len(ids) <= max_len
    assert all(0 <= i < v for i in ids)
    assert all(i >= 3 for i in ids[1:-1])
