"""Stack protocol and distributed hybrid-belief update.

Every robot keeps a :class:`Stack` with one :class:`StackSlot` per robot it
knows about.  A slot holds, per class realization of the sender's objects,
the sender's local marginal over object poses divided by the object priors
(``xi``) and its realization weight divided by the class prior (``phi``),
stamped with the step at which it was produced.

At each step the external update is the product over the other robots'
slots of ``xi_k / xi_{k-1}`` and ``phi_k / phi_{k-1}``, where ``k-1`` refers
to the owner's stack after its previous update.  Unchanged slots cancel,
which is what prevents double counting; ``double_count=True`` drops the
denominators to reproduce the over-confident baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation
from .gaussian import GaussianDensity, divide, marginalize, multiply, object_key
from .hybrid import (
    DEFAULT_PRIOR_SIGMA,
    DEFAULT_SAMPLES,
    ClassRealization,
    HybridBelief,
    StepInputs,
    expand_for_new_objects,
    new_object_priors,
    prune,
    update,
    weak_object_prior,
)

# Smallest phi used when taking logs; weights below this are already pruned.
_PHI_FLOOR = 1e-300


@dataclass(frozen=True)
class SlotEntry:
    realization: ClassRealization
    xi: GaussianDensity
    phi: float

    @property
    def log_phi(self) -> float:
        return math.log(max(self.phi, _PHI_FLOOR))


@dataclass(frozen=True)
class StackSlot:
    robot: int
    timestamp: int
    entries: Tuple[SlotEntry, ...] = ()

    @property
    def objects(self) -> Tuple[int, ...]:
        return self.entries[0].realization.objects if self.entries else ()

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def lookup(self, realization: ClassRealization) -> Optional[SlotEntry]:
        """Entry for ``realization`` restricted to this slot's objects."""
        index = self.__dict__.get("_lookup")
        if index is None:
            index = {e.realization: e for e in self.entries}
            object.__setattr__(self, "_lookup", index)
        return index.get(realization.restrict(self.objects))


@dataclass(frozen=True)
class Stack:
    owner: int
    slots: Mapping[int, StackSlot] = field(default_factory=dict)

    @classmethod
    def initial(cls, owner: int, robots: Iterable[int] = ()) -> "Stack":
        ids = sorted(set(robots) | {owner})
        return cls(owner, {r: StackSlot(r, 0) for r in ids})

    def timestamps(self) -> Dict[int, int]:
        return {r: s.timestamp for r, s in sorted(self.slots.items())}

    def with_slot(self, slot: StackSlot) -> "Stack":
        slots = dict(self.slots)
        slots[slot.robot] = slot
        return Stack(self.owner, slots)

    def get(self, robot: int) -> Optional[StackSlot]:
        return self.slots.get(robot)


def build_own_slot(hb: HybridBelief, k: int) -> StackSlot:
    """Slot carrying ``hb``'s marginal over its objects, normalized by the priors.

    ``hb`` must be the robot's local-only belief.
    """
    objs = hb.known_objects
    if not objs:
        return StackSlot(hb.robot, int(k))
    keys = [object_key(o) for o in objs]
    prior = GaussianDensity.empty()
    for o in objs:
        prior = multiply(prior, hb.pose_priors[o])
    log_cp = np.log(hb.class_prior)
    entries = []
    for h in hb.hypotheses:
        marg = marginalize(h.belief, keys)
        xi = divide(marg, prior)
        log_phi = h.log_weight - float(sum(log_cp[c - 1] for _, c in h.realization.items))
        entries.append(SlotEntry(h.realization, xi, math.exp(log_phi)))
    entries.sort(key=lambda e: e.realization)
    return StackSlot(hb.robot, int(k), tuple(entries))


def merge_stacks(mine: Stack, received: Sequence[Stack]) -> Stack:
    """Newest slot per robot wins; ties keep the incumbent."""
    slots = dict(mine.slots)
    for other in received:
        for rid, slot in other.slots.items():
            cur = slots.get(rid)
            if cur is None or slot.timestamp > cur.timestamp:
                slots[rid] = slot
    return Stack(mine.owner, dict(sorted(slots.items())))


@dataclass
class ExternalUpdate:
    """Per-realization external factors, evaluated lazily.

    ``contributions`` lists ``(current slot, previous slot or None)`` pairs for
    the slots that take part in this update.
    """

    contributions: List[Tuple[StackSlot, Optional[StackSlot]]] = field(default_factory=list)
    diagnostics: List[str] = field(default_factory=list)

    @property
    def is_identity(self) -> bool:
        return not self.contributions

    @property
    def objects(self) -> Tuple[int, ...]:
        out = set()
        for cur, _ in self.contributions:
            out.update(cur.objects)
        return tuple(sorted(out))

    def object_point(self, obj: int):
        """Linearization point of ``obj`` in the first slot that carries it."""
        for cur, _ in self.contributions:
            for e in cur.entries:
                if object_key(obj) in e.xi:
                    return e.xi.point(object_key(obj))
        raise ContractViolation(f"object {obj} is not carried by any contributing slot")

    def __call__(self, realization: ClassRealization):
        """``(continuous factor or None, log discrete factor)`` for ``realization``."""
        factor: Optional[GaussianDensity] = None
        log_phi = 0.0
        for cur, prev in self.contributions:
            num = cur.lookup(realization)
            if num is None:
                # pruned by the sender: negligible mass, no continuous information
                self._note(f"realization {realization.restrict(cur.objects)} missing from slot r{cur.robot}@{cur.timestamp}")
                log_phi += math.log(_PHI_FLOOR)
                continue
            term = num.xi
            log_phi += num.log_phi
            if prev is not None and not prev.is_empty:
                den = prev.lookup(realization)
                if den is None:
                    self._note(
                        f"realization {realization.restrict(prev.objects)} missing from previous slot r{prev.robot}@{prev.timestamp}"
                    )
                else:
                    term = divide(term, den.xi)
                    log_phi -= den.log_phi
            factor = term if factor is None else multiply(factor, term)
        return factor, log_phi

    def _note(self, msg: str) -> None:
        if msg not in self.diagnostics:
            self.diagnostics.append(msg)


def compute_external_update(current: Stack, previous: Optional[Stack], self_id: int, double_count: bool = False) -> ExternalUpdate:
    """External factors from the slots that changed since ``previous``.

    The owner's own slot is excluded: its data enters through the local
    likelihood.  With ``double_count`` every non-empty slot contributes its
    full content at every call.
    """
    ext = ExternalUpdate()
    for rid, cur in sorted(current.slots.items()):
        if rid == self_id or cur.is_empty:
            continue
        prev = previous.get(rid) if previous is not None else None
        if double_count:
            ext.contributions.append((cur, None))
            continue
        if prev is not None and prev.timestamp == cur.timestamp:
            continue
        ext.contributions.append((cur, prev))
    return ext


def external_object_priors(hb: HybridBelief, ext: ExternalUpdate, sigma: float = DEFAULT_PRIOR_SIGMA):
    """Weak priors for objects first learned through ``ext``."""
    return {o: weak_object_prior(o, ext.object_point(o), sigma) for o in ext.objects if o not in hb.known_objects}


def distributed_update(
    dist_hb: HybridBelief,
    inputs: StepInputs,
    ext: Optional[ExternalUpdate],
    model,
    rng: Optional[np.random.Generator] = None,
    n_samples: int = DEFAULT_SAMPLES,
    eps: Optional[np.ndarray] = None,
    prune_ratio: float = 0.0,
    prior_sigma: float = DEFAULT_PRIOR_SIGMA,
    **kw,
) -> HybridBelief:
    """One step of the distributed belief: external factors, then local data.

    Objects that are new to ``dist_hb`` (seen locally or carried by ``ext``)
    are expanded first, so realizations cover the union object set.
    """
    ext = ext or ExternalUpdate()
    local_new = new_object_priors(dist_hb, inputs, prior_sigma)
    hb = expand_for_new_objects(dist_hb, sorted(local_new), pose_priors=local_new)
    ext_new = external_object_priors(hb, ext, prior_sigma)
    hb = expand_for_new_objects(hb, sorted(ext_new), pose_priors=ext_new)
    hb = update(hb, inputs, model, rng=rng, n_samples=n_samples, eps=eps, ext=None if ext.is_identity else ext, **kw)
    return prune(hb, prune_ratio)
