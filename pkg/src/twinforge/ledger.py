"""An event-sourced NFT registry for digital-twin tokens.

State is never persisted directly: every mutation is an event appended to
``event_log`` and applied through the same code path that :meth:`Ledger.replay`
uses, so a ledger rebuilt from its log is identical to the live one.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from twinforge.exceptions import (
    AuthorizationError,
    NotFoundError,
    StateError,
    ValidationError,
)

ENCODING_LENGTH = 62
CONTRACT_IDENTITY = "contract:twin-metadata-updater"


class Provenance(str, Enum):
    MINT = "MINT"
    CLONE_BY_URI = "CLONE_BY_URI"
    CLONE_BY_TOKEN_ID = "CLONE_BY_TOKEN_ID"
    CLONE_RANDOM = "CLONE_RANDOM"


@dataclass(frozen=True)
class ReadOnlyAttributes:
    pattern_encoding: tuple = None
    updated_at: int = 0

    def __post_init__(self):
        if self.pattern_encoding is not None:
            enc = tuple(float(v) for v in self.pattern_encoding)
            if len(enc) != ENCODING_LENGTH:
                raise ValidationError(
                    f"pattern_encoding must have {ENCODING_LENGTH} values, got {len(enc)}"
                )
            if not all(np.isfinite(enc)):
                raise ValidationError("pattern_encoding has non-finite values")
            object.__setattr__(self, "pattern_encoding", enc)

    @property
    def is_empty(self):
        return self.pattern_encoding is None and self.updated_at == 0


@dataclass(frozen=True)
class DynamicMetadata:
    """Metadata document with contract-managed and owner-managed attributes.

    ``writable`` is an ordered tuple of ``(trait_type, value)`` string pairs.
    """

    name: str
    description: str
    image_ref: str
    read_only: ReadOnlyAttributes = field(default_factory=ReadOnlyAttributes)
    writable: tuple = ()

    def __post_init__(self):
        pairs = self.writable.items() if isinstance(self.writable, dict) else self.writable
        pairs = tuple((str(k), str(v)) for k, v in pairs)
        keys = [k for k, _ in pairs]
        if len(set(keys)) != len(keys):
            raise ValidationError("duplicate trait_type in writable_attributes")
        object.__setattr__(self, "writable", pairs)
        for name in ("name", "description", "image_ref"):
            if not isinstance(getattr(self, name), str):
                raise ValidationError(f"metadata field {name!r} must be a string")

    @property
    def traits(self):
        return dict(self.writable)

    def to_json_dict(self):
        ro = {"updated_at": self.read_only.updated_at}
        if self.read_only.pattern_encoding is not None:
            ro = {"pattern_encoding": list(self.read_only.pattern_encoding), **ro}
        return {
            "name": self.name,
            "description": self.description,
            "image": self.image_ref,
            "readOnly_attributes": ro,
            "writable_attributes": [{"trait_type": k, "value": v} for k, v in self.writable],
        }

    @classmethod
    def from_json_dict(cls, doc):
        expected = {"name", "description", "image", "readOnly_attributes", "writable_attributes"}
        missing = expected - set(doc)
        if missing:
            raise ValidationError(f"metadata document missing fields {sorted(missing)}")
        extra = set(doc) - expected
        if extra:
            raise ValidationError(f"metadata document has unknown fields {sorted(extra)}")
        ro = doc["readOnly_attributes"] or {}
        enc = ro.get("pattern_encoding")
        return cls(
            doc["name"],
            doc["description"],
            doc["image"],
            ReadOnlyAttributes(tuple(enc) if enc is not None else None, int(ro.get("updated_at", 0))),
            tuple((t["trait_type"], t["value"]) for t in doc["writable_attributes"]),
        )

    def to_bytes(self):
        """Canonical serialization; equal documents give equal bytes."""
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":")).encode()

    def flatten(self, include_read_only=False):
        flat = {"name": self.name, "description": self.description, "image": self.image_ref}
        for k, v in self.writable:
            flat[f"trait:{k}"] = v
        if include_read_only:
            if self.read_only.pattern_encoding is not None:
                flat["readOnly:pattern_encoding"] = self.read_only.pattern_encoding
            flat["readOnly:updated_at"] = self.read_only.updated_at
        return flat


def metadata_similarity(doc_a, doc_b, include_read_only=False):
    """Percentage of matching key/value pairs over the union of keys."""
    fa = doc_a.flatten(include_read_only)
    fb = doc_b.flatten(include_read_only)
    union = set(fa) | set(fb)
    if not union:
        return 100.0
    matches = sum(1 for k in union if k in fa and k in fb and fa[k] == fb[k])
    return round(100.0 * matches / len(union), 2)


@dataclass(frozen=True)
class TokenRecord:
    token_id: int
    owner: str
    uri: str
    created_at: int
    provenance: Provenance
    source_token: int = None

    def __post_init__(self):
        is_clone = self.provenance is not Provenance.MINT
        if is_clone != (self.source_token is not None):
            raise ValidationError("source_token must be set exactly for clone provenances")

    def to_dict(self):
        return {
            "token_id": self.token_id,
            "owner": self.owner,
            "uri": self.uri,
            "created_at": self.created_at,
            "provenance": self.provenance.value,
            "source_token": self.source_token,
        }


@dataclass(frozen=True)
class Event:
    timestamp: int
    kind: str
    payload: dict

    def to_dict(self):
        return {"timestamp": self.timestamp, "kind": self.kind, "payload": self.payload}


class Ledger:
    """Simulated token registry plus metadata hosting.

    ``updater`` is the only identity allowed to write ``readOnly_attributes``.
    The logical clock advances by one per event and stamps token creation.
    """

    def __init__(self, updater=CONTRACT_IDENTITY):
        self.updater = updater
        self.tokens = {}
        self.metadata_store = {}
        self.bindings = {}
        self.next_id = 1
        self.clock = 0
        self.event_log = []

    # -- event plumbing -----------------------------------------------------

    def _emit(self, kind, payload):
        event = Event(self.clock + 1, kind, json.loads(json.dumps(payload)))
        self._apply(event)
        self.event_log.append(event)
        return event

    def _apply(self, event):
        handler = getattr(self, f"_apply_{event.kind.lower()}", None)
        if handler is None:
            raise ValidationError(f"unknown event kind {event.kind!r}")
        handler(event.timestamp, event.payload)
        self.clock = event.timestamp

    def _apply_mint(self, ts, p):
        self.metadata_store[p["uri"]] = DynamicMetadata.from_json_dict(p["metadata"])
        self.tokens[p["token_id"]] = TokenRecord(p["token_id"], p["owner"], p["uri"], ts,
                                                 Provenance.MINT)
        self.next_id = p["token_id"] + 1

    def _apply_clone(self, ts, p):
        self.metadata_store[p["uri"]] = DynamicMetadata.from_json_dict(p["metadata"])
        self.tokens[p["token_id"]] = TokenRecord(p["token_id"], p["owner"], p["uri"], ts,
                                                 Provenance(p["provenance"]), p["source_token"])
        self.next_id = p["token_id"] + 1

    def _apply_set_writable(self, ts, p):
        doc = self.metadata_store[p["uri"]]
        traits = doc.traits
        traits.update({k: v for k, v in p["traits"]})
        self.metadata_store[p["uri"]] = DynamicMetadata(
            doc.name, doc.description, doc.image_ref, doc.read_only, tuple(traits.items())
        )

    def _apply_update_read_only(self, ts, p):
        doc = self.metadata_store[p["uri"]]
        ro = ReadOnlyAttributes(tuple(p["pattern_encoding"]), p["updated_at"])
        self.metadata_store[p["uri"]] = DynamicMetadata(
            doc.name, doc.description, doc.image_ref, ro, doc.writable
        )

    def _apply_bind(self, ts, p):
        self.bindings[p["token_id"]] = dict(p)

    @classmethod
    def replay(cls, events, updater=CONTRACT_IDENTITY):
        ledger = cls(updater)
        for ev in events:
            ev = ev if isinstance(ev, Event) else Event(ev["timestamp"], ev["kind"], ev["payload"])
            if ev.timestamp != ledger.clock + 1:
                raise ValidationError(f"event log gap at timestamp {ev.timestamp}")
            ledger._apply(ev)
            ledger.event_log.append(ev)
        return ledger

    def save(self, path):
        events = [ev.to_dict() for ev in self.event_log]
        Path(path).write_text(json.dumps(events, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path, updater=CONTRACT_IDENTITY):
        path = Path(path)
        if not path.exists():
            return cls(updater)
        return cls.replay(json.loads(path.read_text(encoding="utf-8")), updater)

    def snapshot(self):
        """Canonical plain-data view of the derived state."""
        return {
            "tokens": {tid: rec.to_dict() for tid, rec in sorted(self.tokens.items())},
            "metadata_store": {
                uri: doc.to_json_dict() for uri, doc in sorted(self.metadata_store.items())
            },
            "bindings": {tid: b for tid, b in sorted(self.bindings.items())},
            "next_id": self.next_id,
            "clock": self.clock,
        }

    def __eq__(self, other):
        if not isinstance(other, Ledger):
            return NotImplemented
        return (
            self.tokens == other.tokens
            and self.metadata_store == other.metadata_store
            and self.bindings == other.bindings
            and self.next_id == other.next_id
            and self.clock == other.clock
        )

    # -- queries ------------------------------------------------------------

    def token(self, token_id):
        try:
            return self.tokens[int(token_id)]
        except (KeyError, TypeError, ValueError):
            raise NotFoundError(f"unknown token {token_id}") from None

    def metadata(self, token_id):
        return self.metadata_store[self.token(token_id).uri]

    def metadata_at(self, uri):
        try:
            return self.metadata_store[uri]
        except KeyError:
            raise NotFoundError(f"no metadata hosted at {uri!r}") from None

    def similarity(self, token_a, token_b, include_read_only=False):
        return metadata_similarity(self.metadata(token_a), self.metadata(token_b),
                                   include_read_only)

    def _fresh_uri(self, owner, token_id):
        return f"twin://{owner}/{token_id}.json"

    # -- mutations ----------------------------------------------------------

    def mint(self, owner, metadata):
        """Genuine creation: host ``metadata`` at a fresh URI and mint a token."""
        if not isinstance(metadata, DynamicMetadata):
            raise ValidationError("mint needs a DynamicMetadata document")
        if not metadata.read_only.is_empty:
            raise AuthorizationError("readOnly_attributes are written by the contract only")
        token_id = self.next_id
        uri = self._fresh_uri(owner, token_id)
        self._emit("MINT", {"token_id": token_id, "owner": owner, "uri": uri,
                            "metadata": metadata.to_json_dict()})
        return token_id

    def _clone(self, owner, metadata, provenance, source_token):
        token_id = self.next_id
        self._emit("CLONE", {
            "token_id": token_id,
            "owner": owner,
            "uri": self._fresh_uri(owner, token_id),
            "provenance": provenance.value,
            "source_token": source_token,
            "metadata": metadata.to_json_dict(),
        })
        return token_id

    def clone_by_uri(self, owner, uri):
        """Mirror the document hosted at ``uri`` onto a new, clone-owned URI."""
        doc = self.metadata_at(uri)
        source = min(tid for tid, rec in self.tokens.items() if rec.uri == uri)
        return self._clone(owner, doc, Provenance.CLONE_BY_URI, source)

    def clone_by_token_id(self, owner, token_id):
        rec = self.token(token_id)
        doc = self.metadata_store[rec.uri]
        return self._clone(owner, doc, Provenance.CLONE_BY_TOKEN_ID, rec.token_id)

    def clone_random(self, owner, source_token, field_count, seed=0):
        """Impersonate ``source_token``'s name, description and image with
        ``field_count`` randomly populated traits."""
        src = self.metadata(source_token)
        if int(field_count) < 0:
            raise ValidationError("field_count must be >= 0")
        rng = np.random.default_rng(seed)
        traits = {}
        while len(traits) < int(field_count):
            key = f"attr_{rng.integers(0, 2**32):08x}"
            traits[key] = f"{rng.integers(0, 2**32):08x}"
        doc = DynamicMetadata(src.name, src.description, src.image_ref, ReadOnlyAttributes(),
                              tuple(traits.items()))
        return self._clone(owner, doc, Provenance.CLONE_RANDOM, int(source_token))

    def set_writable(self, caller, token_id, traits):
        """Owner-only edit of writable traits (add or overwrite)."""
        rec = self.token(token_id)
        if caller != rec.owner:
            raise AuthorizationError(f"{caller!r} does not own token {token_id}")
        pairs = traits.items() if isinstance(traits, dict) else traits
        pairs = [(str(k), str(v)) for k, v in pairs]
        self._emit("SET_WRITABLE", {"token_id": rec.token_id, "uri": rec.uri, "traits": pairs})

    def write_read_only(self, caller, token_id, pattern_encoding):
        """Store a new encoding; only the registered updater may call this."""
        if caller != self.updater:
            raise AuthorizationError(
                f"{caller!r} may not write readOnly_attributes (updater is {self.updater!r})"
            )
        rec = self.token(token_id)
        enc = ReadOnlyAttributes(tuple(pattern_encoding), 1).pattern_encoding
        updated_at = self.metadata_store[rec.uri].read_only.updated_at + 1
        self._emit("UPDATE_READ_ONLY", {"token_id": rec.token_id, "uri": rec.uri,
                                        "pattern_encoding": list(enc), "updated_at": updated_at})
        return updated_at

    def bind(self, token_id, data_source, encoder_ref, classifier_ref, update_interval=1):
        rec = self.token(token_id)
        if rec.token_id in self.bindings:
            raise StateError(f"token {token_id} is already bound")
        if int(update_interval) < 1:
            raise ValidationError("update_interval must be >= 1")
        self._emit("BIND", {"token_id": rec.token_id, "data_source": str(data_source),
                            "encoder_ref": str(encoder_ref), "classifier_ref": str(classifier_ref),
                            "update_interval": int(update_interval)})
