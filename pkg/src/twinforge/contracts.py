"""Contract logic for dynamic metadata: periodic encoding updates, clone
verification, and the clone-divergence demonstration.

A bound token's ``readOnly_attributes.pattern_encoding`` is refreshed only by
the contract identity, from the live telemetry source the token is bound to.
A clone that mirrors the static metadata but is fed from a different device
therefore drifts away from the original after the next update.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from twinforge.exceptions import NotFoundError, StateError, ValidationError
from twinforge.models import ThresholdConfig, encode, predict


@dataclass(frozen=True)
class TwinBinding:
    token_id: int
    data_source: str
    encoder_ref: str
    classifier_ref: str
    update_interval: int = 1


class Outcome(str, Enum):
    GENUINE = "GENUINE"
    FAKE = "FAKE"
    OOC_UNKNOWN = "OOC_UNKNOWN"


@dataclass(frozen=True)
class VerificationVerdict:
    outcome: Outcome
    p_alpha: object
    p_cached: object
    detail: str
    updated_at: int
    tau: float

    def to_dict(self):
        return {
            "outcome": self.outcome.value,
            "detail": self.detail,
            "tau": self.tau,
            "metadata_updated_at": self.updated_at,
            "live": self.p_alpha.to_dict(),
            "cached": self.p_cached.to_dict(),
        }


class InvariantViolation(StateError):
    pass


class PatternFeed:
    """Named live telemetry sources; each tick selects one pattern per source."""

    def __init__(self, sources):
        self.sources = {}
        for name, patterns in sources.items():
            arr = np.asarray(patterns, dtype=np.float64)
            if arr.ndim != 3 or not len(arr):
                raise ValidationError(f"source {name!r} needs a non-empty (n, 34, 5) stack")
            self.sources[str(name)] = arr

    @classmethod
    def from_split(cls, split, subset="test"):
        X, y = (split.test_X, split.test_y) if subset == "test" else (split.train_X, split.train_y)
        return cls({f"dt:{int(c)}": X[y == c] for c in np.unique(y)})

    def __contains__(self, name):
        return name in self.sources

    def pattern_at(self, source, tick):
        try:
            stack = self.sources[source]
        except KeyError:
            raise NotFoundError(f"unknown data source {source!r}") from None
        return stack[int(tick) % len(stack)]


class ModelRegistry:
    """Resolves encoder/classifier references held in bindings."""

    def __init__(self, encoders=None, classifiers=None):
        self.encoders = dict(encoders or {})
        self.classifiers = dict(classifiers or {})

    def encoder(self, ref):
        try:
            return self.encoders[ref]
        except KeyError:
            raise NotFoundError(f"no encoder registered as {ref!r}") from None

    def classifier(self, ref):
        try:
            return self.classifiers[ref]
        except KeyError:
            raise NotFoundError(f"no classifier registered as {ref!r}") from None


class TwinContract:
    """Dynamic-metadata updater and verifier operating on a :class:`Ledger`."""

    def __init__(self, ledger, registry, feed=None):
        self.ledger = ledger
        self.registry = registry
        self.feed = feed

    @property
    def identity(self):
        return self.ledger.updater

    def binding(self, token_id):
        self.ledger.token(token_id)
        b = self.ledger.bindings.get(int(token_id))
        if b is None:
            raise NotFoundError(f"token {token_id} has no twin binding")
        return TwinBinding(b["token_id"], b["data_source"], b["encoder_ref"],
                           b["classifier_ref"], b["update_interval"])

    def bind(self, token_id, data_source, encoder_ref="dae", classifier_ref="clf",
             update_interval=1):
        self.registry.encoder(encoder_ref)
        self.registry.classifier(classifier_ref)
        if self.feed is not None and data_source not in self.feed:
            raise NotFoundError(f"unknown data source {data_source!r}")
        self.ledger.bind(token_id, data_source, encoder_ref, classifier_ref, update_interval)
        return self.binding(token_id)

    def update_metadata(self, binding, live_pattern, caller=None):
        """Encode ``live_pattern`` and store it as the token's pattern_encoding.

        ``binding`` may be a :class:`TwinBinding` or a token id. Only the
        contract identity may write; any other ``caller`` is refused.
        """
        if not isinstance(binding, TwinBinding):
            binding = self.binding(binding)
        caller = self.identity if caller is None else caller
        enc = encode(self.registry.encoder(binding.encoder_ref), np.asarray(live_pattern))
        return self.ledger.write_read_only(caller, binding.token_id, enc.values)

    def update_from_feed(self, token_id, tick):
        b = self.binding(token_id)
        if self.feed is None:
            raise StateError("contract has no telemetry feed")
        return self.update_metadata(b, self.feed.pattern_at(b.data_source, tick))

    def tick(self, tick):
        """Run one update cycle; tokens whose interval divides ``tick`` refresh."""
        updated = []
        for token_id in sorted(self.ledger.bindings):
            b = self.binding(token_id)
            if int(tick) % b.update_interval == 0:
                self.update_from_feed(token_id, tick)
                updated.append(token_id)
        return updated

    def verify(self, token_id, cached_pattern, thr=None):
        """Compare the classifier's verdict on the stored live encoding with its
        verdict on a freshly encoded cached pattern."""
        thr = thr if isinstance(thr, ThresholdConfig) else ThresholdConfig(
            0.695 if thr is None else float(thr))
        b = self.binding(token_id)
        doc = self.ledger.metadata(token_id)
        live = doc.read_only.pattern_encoding
        if live is None:
            raise StateError(f"token {token_id} was never updated: no pattern_encoding")
        clf = self.registry.classifier(b.classifier_ref)
        cached = encode(self.registry.encoder(b.encoder_ref), np.asarray(cached_pattern))
        p_alpha = predict(clf, np.asarray(live), thr)
        p_cached = predict(clf, cached, thr)
        if not (p_alpha.accepted and p_cached.accepted):
            outcome = Outcome.OOC_UNKNOWN
            detail = "prediction confidence below tau; behaviour matches no known twin"
        elif p_alpha.label == p_cached.label:
            outcome = Outcome.GENUINE
            detail = "verification successful (genuine clone)"
        else:
            outcome = Outcome.FAKE
            detail = "verification failed (fake clone)"
        return VerificationVerdict(outcome, p_alpha, p_cached, detail,
                                   doc.read_only.updated_at, thr.tau)

    def divergence_demo(self, original, ticks, fake_source, attacker="attacker",
                        start_tick=0, cached_pattern=None, thr=None):
        """Clone ``original`` twice at the same instant and let them drift.

        The genuine clone (by token id, same owner) is bound to the original's
        source; the fake clone (mirrored URI, attacker-owned) is bound to
        ``fake_source``. Raises :class:`InvariantViolation` if the documents
        are not identical at creation, or if after at least one tick the
        genuine clone differs from the original or the fake one does not.
        """
        if int(ticks) < 0:
            raise ValidationError("ticks must be >= 0")
        ledger = self.ledger
        b_o = self.binding(original)
        if fake_source == b_o.data_source:
            raise ValidationError("fake clone must be fed from a different data source")
        rec = ledger.token(original)
        if ledger.metadata(original).read_only.pattern_encoding is None:
            self.update_from_feed(original, start_tick)

        genuine = ledger.clone_by_token_id(rec.owner, original)
        self.bind(genuine, b_o.data_source, b_o.encoder_ref, b_o.classifier_ref,
                  b_o.update_interval)
        fake = ledger.clone_by_uri(attacker, rec.uri)
        self.bind(fake, fake_source, b_o.encoder_ref, b_o.classifier_ref, b_o.update_interval)

        def doc_bytes(tid):
            return ledger.metadata(tid).to_bytes()

        at_creation = doc_bytes(original)
        if not (doc_bytes(genuine) == at_creation == doc_bytes(fake)):
            raise InvariantViolation("clone documents differ from the original at creation")

        def sims():
            return {
                "genuine_static": ledger.similarity(original, genuine),
                "fake_static": ledger.similarity(original, fake),
                "genuine_full": ledger.similarity(original, genuine, include_read_only=True),
                "fake_full": ledger.similarity(original, fake, include_read_only=True),
            }

        before = sims()
        for k in range(1, int(ticks) + 1):
            t = start_tick + k
            for tid in (original, genuine, fake):
                self.update_from_feed(tid, t)

        genuine_same = doc_bytes(genuine) == doc_bytes(original)
        fake_same = doc_bytes(fake) == doc_bytes(original)
        if int(ticks) >= 1 and (not genuine_same or fake_same):
            raise InvariantViolation(
                f"divergence check failed: genuine_same={genuine_same}, fake_same={fake_same}"
            )
        report = {
            "original": int(original),
            "genuine_clone": genuine,
            "fake_clone": fake,
            "ticks": int(ticks),
            "original_source": b_o.data_source,
            "fake_source": fake_source,
            "similarity_before": before,
            "similarity_after": sims(),
            "genuine_matches_original": genuine_same,
            "fake_matches_original": fake_same,
        }
        if cached_pattern is not None:
            report["verify"] = {
                "genuine": self.verify(genuine, cached_pattern, thr).to_dict(),
                "fake": self.verify(fake, cached_pattern, thr).to_dict(),
            }
        return report
