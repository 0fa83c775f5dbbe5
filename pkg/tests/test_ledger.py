import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from ledger_fuzz import run_fuzz

from twinforge.exceptions import (
    AuthorizationError,
    NotFoundError,
    StateError,
    ValidationError,
)
from twinforge.ledger import (
    CONTRACT_IDENTITY,
    DynamicMetadata,
    Ledger,
    Provenance,
    ReadOnlyAttributes,
    TokenRecord,
    metadata_similarity,
)


def doc(name="Heater", description="Lab heater", image="ipfs://h.png", **traits):
    return DynamicMetadata(name, description, image, ReadOnlyAttributes(), traits)


def nine_trait_doc(values):
    return doc(**{f"k{i}": v for i, v in enumerate(values)})


# similarity constructions, each counted by hand in the comments


def test_identical_twelve_field_documents():
    # 3 fixed fields + 9 traits, all equal: 12/12
    a = nine_trait_doc("abcdefghi")
    assert metadata_similarity(a, nine_trait_doc("abcdefghi")) == 100.0


def test_twelve_keys_one_match():
    # same 12 keys; only name agrees: 1/12 = 8.333...
    a = nine_trait_doc("abcdefghi")
    b = DynamicMetadata("Heater", "other", "ipfs://x.png", ReadOnlyAttributes(),
                        {f"k{i}": v for i, v in enumerate("ABCDEFGHI")})
    assert len(a.flatten().keys() | b.flatten().keys()) == 12
    assert metadata_similarity(a, b) == 8.33


def test_twelve_keys_eleven_match():
    # one trait value differs: 11/12 = 91.666...
    a = nine_trait_doc("abcdefghi")
    b = nine_trait_doc("abcdefghX")
    assert metadata_similarity(a, b) == 91.67


def test_eleven_keys_seven_match():
    # 3 fixed + 8 traits; fixed fields and traits k0..k3 agree: 7/11 = 63.636...
    a = doc(**{f"k{i}": "v" for i in range(8)})
    b = doc(**{f"k{i}": ("v" if i < 4 else "w") for i in range(8)})
    assert len(a.flatten().keys() | b.flatten().keys()) == 11
    assert metadata_similarity(a, b) == 63.64


def test_union_counts_keys_present_on_one_side():
    # keys {name, description, image, x, y}: 3 matching of 5
    assert metadata_similarity(doc(x="1"), doc(y="1")) == 60.0


def test_read_only_excluded_by_default():
    a = doc(x="1")
    b = DynamicMetadata(a.name, a.description, a.image_ref,
                        ReadOnlyAttributes(tuple(np.ones(62)), 4), a.writable)
    assert metadata_similarity(a, b) == 100.0
    assert metadata_similarity(a, b, include_read_only=True) < 100.0


trait_dicts = st.dictionaries(st.sampled_from("abcdefgh"), st.sampled_from("xyz"), max_size=6)


@settings(max_examples=100, deadline=None)
@given(ta=trait_dicts, tb=trait_dicts, same_name=st.booleans())
def test_similarity_properties(ta, tb, same_name):
    a = doc(**ta)
    b = doc(name="Heater" if same_name else "Other", **tb)
    s = metadata_similarity(a, b)
    assert s == metadata_similarity(b, a)
    assert 0.0 <= s <= 100.0
    assert (s == 100.0) == (a.flatten() == b.flatten())
    shuffled = doc(**dict(reversed(list(ta.items()))))
    assert metadata_similarity(shuffled, b) == s


# documents


def test_metadata_json_format():
    d = DynamicMetadata("n", "d", "i", ReadOnlyAttributes(tuple(range(62)), 2), {"color": "red"})
    j = d.to_json_dict()
    assert set(j) == {"name", "description", "image", "readOnly_attributes", "writable_attributes"}
    assert j["readOnly_attributes"]["updated_at"] == 2
    assert len(j["readOnly_attributes"]["pattern_encoding"]) == 62
    assert j["writable_attributes"] == [{"trait_type": "color", "value": "red"}]
    assert DynamicMetadata.from_json_dict(json.loads(json.dumps(j))) == d


def test_metadata_rejects_bad_documents():
    with pytest.raises(ValidationError):
        ReadOnlyAttributes(tuple(range(61)), 1)
    with pytest.raises(ValidationError):
        DynamicMetadata("n", "d", "i", ReadOnlyAttributes(), (("a", "1"), ("a", "2")))
    j = doc().to_json_dict()
    j["extra"] = 1
    with pytest.raises(ValidationError):
        DynamicMetadata.from_json_dict(j)


def test_token_record_source_iff_clone():
    with pytest.raises(ValidationError):
        TokenRecord(1, "a", "u", 1, Provenance.MINT, source_token=3)
    with pytest.raises(ValidationError):
        TokenRecord(1, "a", "u", 1, Provenance.CLONE_BY_URI)


# ledger operations


def test_nine_mints_and_replay():
    ledger = Ledger()
    ids = [ledger.mint(f"owner{i}", doc(serial=str(i))) for i in range(9)]
    assert ids == list(range(1, 10))
    assert Ledger.replay([e.to_dict() for e in ledger.event_log]) == ledger


def test_mint_round_trips_metadata():
    ledger = Ledger()
    d = doc(color="red", size="2")
    tid = ledger.mint("alice", d)
    assert ledger.metadata(tid) == d
    assert ledger.metadata(tid).to_bytes() == d.to_bytes()
    assert ledger.token(tid).provenance is Provenance.MINT


def test_mint_refuses_read_only_content():
    d = DynamicMetadata("n", "d", "i", ReadOnlyAttributes(tuple(np.zeros(62)), 1))
    with pytest.raises(AuthorizationError):
        Ledger().mint("alice", d)


def test_clone_by_uri_is_identical_at_creation():
    ledger = Ledger()
    src = ledger.mint("alice", doc(color="red"))
    clone = ledger.clone_by_uri("mallory", ledger.token(src).uri)
    rec = ledger.token(clone)
    assert rec.uri != ledger.token(src).uri
    assert rec.provenance is Provenance.CLONE_BY_URI and rec.source_token == src
    assert ledger.similarity(src, clone) == 100.0


def test_clone_by_token_id():
    ledger = Ledger()
    src = ledger.mint("alice", doc(color="red"))
    clone = ledger.clone_by_token_id("bob", src)
    assert ledger.token(clone).provenance is Provenance.CLONE_BY_TOKEN_ID
    assert ledger.metadata(clone) == ledger.metadata(src)
    with pytest.raises(NotFoundError):
        ledger.clone_by_token_id("bob", 999)
    with pytest.raises(NotFoundError):
        ledger.clone_by_uri("bob", "twin://nobody/1.json")


def test_clone_random_with_no_overlapping_traits():
    ledger = Ledger()
    src = ledger.mint("alice", doc(color="red", size="2"))
    clone = ledger.clone_random("mallory", src, 4, seed=3)
    traits = ledger.metadata(clone).traits
    assert len(traits) == 4 and not set(traits) & {"color", "size"}
    # oracle: 3 fixed fields match out of 3 + 2 + 4 keys
    assert ledger.similarity(src, clone) == round(100 * 3 / 9, 2)
    assert ledger.token(clone).provenance is Provenance.CLONE_RANDOM


def test_writable_edit_is_owner_only():
    ledger = Ledger()
    tid = ledger.mint("alice", doc(color="red"))
    ledger.set_writable("alice", tid, {"color": "blue", "size": "3"})
    assert ledger.metadata(tid).traits == {"color": "blue", "size": "3"}
    with pytest.raises(AuthorizationError):
        ledger.set_writable("bob", tid, {"color": "green"})


def test_read_only_write_is_updater_only():
    ledger = Ledger()
    tid = ledger.mint("alice", doc())
    with pytest.raises(AuthorizationError):
        ledger.write_read_only("alice", tid, np.zeros(62))
    assert ledger.write_read_only(CONTRACT_IDENTITY, tid, np.zeros(62)) == 1
    assert ledger.write_read_only(CONTRACT_IDENTITY, tid, np.ones(62)) == 2
    assert ledger.metadata(tid).read_only.pattern_encoding == tuple([1.0] * 62)


def test_bind_once():
    ledger = Ledger()
    tid = ledger.mint("alice", doc())
    ledger.bind(tid, "dt:0", "dae", "clf")
    with pytest.raises(StateError):
        ledger.bind(tid, "dt:1", "dae", "clf")


def test_unknown_token_lookups():
    ledger = Ledger()
    with pytest.raises(NotFoundError):
        ledger.similarity(1, 2)
    with pytest.raises(NotFoundError):
        ledger.token("x")


def test_failed_operations_do_not_consume_ids():
    ledger = Ledger()
    a = ledger.mint("alice", doc())
    for bad in (lambda: ledger.clone_by_token_id("bob", 42),
                lambda: ledger.set_writable("bob", a, {"x": "1"})):
        with pytest.raises((NotFoundError, AuthorizationError)):
            bad()
    assert ledger.mint("bob", doc()) == a + 1


def test_save_load_round_trip(tmp_path):
    ledger = Ledger()
    run_fuzz(ledger, 200, seed=1)
    path = tmp_path / "ledger.json"
    ledger.save(path)
    events = json.loads(path.read_text())
    assert isinstance(events, list) and {"timestamp", "kind", "payload"} == set(events[0])
    assert Ledger.load(path) == ledger
    assert Ledger.load(tmp_path / "missing.json") == Ledger()


def test_replay_rejects_gaps_and_unknown_events():
    ledger = Ledger()
    ledger.mint("a", doc())
    ledger.mint("b", doc())
    events = [e.to_dict() for e in ledger.event_log]
    with pytest.raises(ValidationError):
        Ledger.replay(events[1:])
    with pytest.raises(ValidationError):
        Ledger.replay([{"timestamp": 1, "kind": "BURN", "payload": {}}])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fuzz_replay_is_bit_exact(seed, tmp_path):
    ledger = Ledger()
    results = run_fuzz(ledger, 1000, seed)
    assert any(isinstance(r, Exception) for _, r in results)
    path = tmp_path / "ledger.json"
    ledger.save(path)
    rebuilt = Ledger.load(path)
    assert rebuilt == ledger
    assert json.dumps(rebuilt.snapshot(), sort_keys=True) == json.dumps(ledger.snapshot(),
                                                                         sort_keys=True)
    ids = sorted(ledger.tokens)
    assert ids == list(range(1, len(ids) + 1))
