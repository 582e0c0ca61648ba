"""Controller that routes each step and applies residual experts on top of the planner."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .controller import Planner
from .encoder import Encoder
from .expert import ExpertParams, compose_action, gate
from .indexer import ClusterSet
from .shiftenv import ID_LABEL, Decision, EnvState, EpisodeRngs

LATCH_MODES = ("off", "cluster", "reject")


class ExpertAgent:
    """Planner + encoder + gating.

    The planner consumes ``rngs.planner`` exactly as the bare baseline does and
    random gating draws only from ``rngs.gate``, so an episode routed to ID at
    every step replays the baseline bit for bit.

    ``latch`` controls memory across steps within an episode. ``"off"`` routes
    every step independently. ``"cluster"`` keeps the first non-ID label for the
    rest of the episode. ``"reject"`` keeps only the decision to leave ID: later
    steps still route, but among the shift clusters alone.
    """

    def __init__(self, planner: Planner, encoder: Encoder, clusters: ClusterSet,
                 experts: Mapping[str, ExpertParams], mode: str = "jepa",
                 designated: str | None = None, candidates: Sequence[str] | None = None,
                 latch: str = "off"):
        if latch not in LATCH_MODES:
            raise ValueError(f"unknown latch {latch!r}; expected one of {LATCH_MODES}")
        self.planner, self.encoder, self.clusters = planner, encoder, clusters
        self.experts = dict(experts)
        self.mode, self.designated, self.latch = mode, designated, latch
        self.candidates = list(candidates) if candidates is not None else sorted(self.experts)
        self._latched: str | None = None
        self._left_id = False

    def __call__(self, state: EnvState, history, rngs: EpisodeRngs) -> Decision:
        if state.t == 0:
            self._latched, self._left_id = None, False
        a_base = self.planner(state, history, rngs)
        h = self.encoder.embed_history(history)
        if self._latched is not None:
            label = self._latched
        else:
            dec = gate(self.mode, h, self.clusters, rngs.gate, self.designated, self.candidates)
            label = dec.assigned
            if label == ID_LABEL and self._left_id:
                label = self._nearest_shift(dec)
            if label != ID_LABEL:
                self._left_id = self.latch == "reject"
                if self.latch == "cluster":
                    self._latched = label
        if label == ID_LABEL:
            return Decision(a_base, a_base, label)
        ctx = np.append(h, a_base)
        return Decision(compose_action(a_base, label, self.experts, ctx), a_base, label)

    def _nearest_shift(self, dec) -> str:
        if self.mode == "coarse":
            return self.designated
        shifts = [k for k in self.clusters.shift_labels if k in dec.distances]
        if not shifts:
            return ID_LABEL
        # shift distances in a routing decision are unbiased; labels are already sorted
        return min(shifts, key=lambda k: dec.distances[k])
