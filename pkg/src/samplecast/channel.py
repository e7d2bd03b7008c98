"""Stochastic per-fragment loss models and simulated links.

Loss is decided at whole-message granularity. Each link owns an
independent deterministic RNG stream so adding a link never perturbs
another link's loss sequence.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(run_seed: int, label: str) -> int:
    """Stable 64-bit seed for an independent per-link RNG stream."""
    digest = hashlib.blake2b(
        b"%d:%s" % (run_seed, label.encode()), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


def fer_from_ber(ber: float, frame_bytes: int) -> float:
    """Frame error rate for independent bit errors over a whole frame."""
    if not 0.0 <= ber <= 1.0:
        raise ValueError("ber must lie in [0, 1]")
    if frame_bytes <= 0:
        raise ValueError("frame_bytes must be positive")
    return 1.0 - (1.0 - ber) ** (8 * frame_bytes)


class IidLoss:
    """Uniform i.i.d. loss with fixed probability per message."""

    def __init__(self, p_loss: float):
        if not 0.0 <= p_loss <= 1.0:
            raise ValueError("p_loss must lie in [0, 1]")
        self.p_loss = p_loss

    def decide_loss(self, rng: random.Random, frame_bytes: int) -> bool:
        p = self.p_loss
        if p <= 0.0:
            return False
        if p >= 1.0:
            return True
        return rng.random() < p


class BerLoss:
    """Loss derived from a bit error rate and the actual frame length."""

    def __init__(self, ber: float):
        if not 0.0 <= ber <= 1.0:
            raise ValueError("ber must lie in [0, 1]")
        self.ber = ber

    def decide_loss(self, rng: random.Random, frame_bytes: int) -> bool:
        return rng.random() < fer_from_ber(self.ber, frame_bytes)


GOOD = 0
BAD = 1


class GilbertElliot:
    """Two-state Markov loss process producing correlated bursts.

    The state advances exactly once per transmission opportunity (not
    per wall-clock tick), which makes burst lengths independent of idle
    gaps. Loss is drawn from the state in effect before the transition.
    """

    def __init__(
        self,
        p_g2b: float,
        p_b2g: float,
        loss_good: float = 0.0,
        loss_bad: float = 1.0,
        start_state: int = GOOD,
    ):
        for name, val in (
            ("p_g2b", p_g2b),
            ("p_b2g", p_b2g),
            ("loss_good", loss_good),
            ("loss_bad", loss_bad),
        ):
            if not 0.0 <= val <= 1.0:
                raise ValueError("%s must lie in [0, 1]" % name)
        self.p_g2b = p_g2b
        self.p_b2g = p_b2g
        self.loss_good = loss_good
        self.loss_bad = loss_bad
        self.state = start_state

    def decide_loss(self, rng: random.Random, frame_bytes: int) -> bool:
        if self.state == GOOD:
            lost = rng.random() < self.loss_good
            if rng.random() < self.p_g2b:
                self.state = BAD
        else:
            lost = rng.random() < self.loss_bad
            if rng.random() < self.p_b2g:
                self.state = GOOD
        return lost


def ge_stationary_loss(model: GilbertElliot) -> float:
    """Long-run loss probability of a Gilbert-Elliot chain (oracle)."""
    denom = model.p_g2b + model.p_b2g
    if denom <= 0.0:
        raise ValueError("degenerate chain: both transition probabilities zero")
    pi_bad = model.p_g2b / denom
    return pi_bad * model.loss_bad + (1.0 - pi_bad) * model.loss_good


class Lossless:
    def decide_loss(self, rng: random.Random, frame_bytes: int) -> bool:
        return False


class Link:
    """Unidirectional link: loss model + fixed propagation delay.

    try_send draws the loss decision and updates occupancy counters; the
    caller schedules the arrival event. An administratively-down link
    drops unconditionally (used by the handover layer). scripted_drops
    forces loss of specific transmission indices for trace tests.
    """

    def __init__(
        self,
        link_id: str,
        model,
        propagation_us: int,
        rng: random.Random,
        extra_latency_us: int = 0,
    ):
        self.link_id = link_id
        self.model = model
        self.propagation_us = propagation_us
        self.extra_latency_us = extra_latency_us
        self.rng = rng
        self.admin_up = True
        self.tx_index = 0
        self.sent = 0
        self.delivered = 0
        self.bytes_sent = 0
        self.scripted_drops: set[int] = set()

    @property
    def latency_us(self) -> int:
        return self.propagation_us + self.extra_latency_us

    def try_send(self, frame_bytes: int, bypass_loss: bool = False) -> bool:
        """Charge one transmission; True if the message survives."""
        idx = self.tx_index
        self.tx_index += 1
        self.sent += 1
        self.bytes_sent += frame_bytes
        if not self.admin_up:
            return False
        if idx in self.scripted_drops:
            return False
        if bypass_loss:
            self.delivered += 1
            return True
        if self.model.decide_loss(self.rng, frame_bytes):
            return False
        self.delivered += 1
        return True

    @property
    def delivery_rate(self) -> float:
        return self.delivered / self.sent if self.sent else 1.0
