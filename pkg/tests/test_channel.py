"""Loss models: closed forms, empirical agreement, link independence."""

import random
from fractions import Fraction

import pytest

from samplecast.channel import (
    BAD,
    GOOD,
    BerLoss,
    GilbertElliot,
    IidLoss,
    Link,
    Lossless,
    derive_seed,
    fer_from_ber,
    ge_stationary_loss,
)


class TestFerFromBer:
    def test_endpoints(self):
        assert fer_from_ber(0.0, 1500) == 0.0
        assert fer_from_ber(1.0, 1500) == 1.0

    def test_closed_form_value(self):
        # Oracle: exact rational evaluation of 1 - (1 - 1e-5)^(8*1500).
        exact = float(1 - (1 - Fraction(1, 100_000)) ** 12_000)
        assert exact == pytest.approx(0.11308009543800, abs=1e-12)
        assert fer_from_ber(1e-5, 1500) == pytest.approx(exact, abs=1e-9)

    def test_monotone_in_length(self):
        assert fer_from_ber(1e-5, 3000) > fer_from_ber(1e-5, 1500)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            fer_from_ber(-0.1, 100)
        with pytest.raises(ValueError):
            fer_from_ber(0.5, 0)


class TestGeStationary:
    def test_quarter_bad(self):
        model = GilbertElliot(p_g2b=0.1, p_b2g=0.3, loss_good=0.0, loss_bad=1.0)
        assert ge_stationary_loss(model) == pytest.approx(0.25, abs=1e-12)

    def test_all_lossy(self):
        model = GilbertElliot(p_g2b=0.5, p_b2g=0.5, loss_good=1.0, loss_bad=1.0)
        assert ge_stationary_loss(model) == pytest.approx(1.0, abs=1e-12)

    def test_mixed(self):
        model = GilbertElliot(p_g2b=0.2, p_b2g=0.2, loss_good=0.0, loss_bad=0.8)
        assert ge_stationary_loss(model) == pytest.approx(0.40, abs=1e-12)

    def test_degenerate_rejected(self):
        model = GilbertElliot(p_g2b=0.0, p_b2g=0.0)
        with pytest.raises(ValueError):
            ge_stationary_loss(model)


class TestEmpirical:
    def test_iid_endpoints(self):
        rng = random.Random(1)
        always = IidLoss(1.0)
        never = IidLoss(0.0)
        assert all(always.decide_loss(rng, 100) for _ in range(100))
        assert not any(never.decide_loss(rng, 100) for _ in range(100))

    def test_iid_half_large_sample(self):
        rng = random.Random(42)
        model = IidLoss(0.5)
        n = 100_000
        losses = sum(model.decide_loss(rng, 100) for _ in range(n))
        assert abs(losses / n - 0.5) < 0.01

    def test_ge_empirical_matches_stationary(self):
        model = GilbertElliot(p_g2b=0.1, p_b2g=0.3, loss_good=0.0, loss_bad=1.0)
        rng = random.Random(7)
        for _ in range(1000):  # burn-in toward stationarity
            model.decide_loss(rng, 100)
        n = 100_000
        losses = sum(model.decide_loss(rng, 100) for _ in range(n))
        assert abs(losses / n - ge_stationary_loss(model)) < 0.01

    def test_ge_mean_burst_length(self):
        p_b2g = 0.2
        model = GilbertElliot(p_g2b=0.05, p_b2g=p_b2g, loss_good=0.0, loss_bad=1.0)
        rng = random.Random(11)
        bursts = []
        current = 0
        while len(bursts) < 10_000:
            was_bad = model.state == BAD
            model.decide_loss(rng, 100)
            if was_bad:
                current += 1
            elif current:
                bursts.append(current)
                current = 0
        mean = sum(bursts) / len(bursts)
        assert abs(mean - 1 / p_b2g) / (1 / p_b2g) < 0.05

    def test_ber_uses_frame_length(self):
        rng = random.Random(3)
        model = BerLoss(1e-4)
        n = 20_000
        short = sum(BerLoss(1e-4).decide_loss(random.Random(3), 10) for _ in range(n))
        long = sum(BerLoss(1e-4).decide_loss(random.Random(4), 1000) for _ in range(n))
        assert long > short


class TestLink:
    def make_link(self, model=None, seed=0, label="l"):
        return Link(label, model or Lossless(), 50, random.Random(seed))

    def test_lossless_delivers(self):
        link = self.make_link()
        assert all(link.try_send(100) for _ in range(10))
        assert link.sent == 10 and link.delivered == 10
        assert link.bytes_sent == 1000

    def test_admin_down_drops_unconditionally(self):
        link = self.make_link()
        link.admin_up = False
        assert not any(link.try_send(100) for _ in range(10))

    def test_scripted_drops(self):
        link = self.make_link()
        link.scripted_drops = {1, 3}
        results = [link.try_send(10) for _ in range(5)]
        assert results == [True, False, True, False, True]

    def test_bypass_loss_for_control(self):
        link = Link("l", IidLoss(1.0), 10, random.Random(0))
        assert link.try_send(10, bypass_loss=True)
        assert not link.try_send(10)

    def test_identical_seed_identical_sequence(self):
        a = Link("x", IidLoss(0.5), 10, random.Random(derive_seed(9, "x")))
        b = Link("x", IidLoss(0.5), 10, random.Random(derive_seed(9, "x")))
        assert [a.try_send(1) for _ in range(200)] == [
            b.try_send(1) for _ in range(200)
        ]

    def test_links_are_independent(self):
        # Interleaving traffic on link B must not perturb link A's trace.
        def trace_a(with_b):
            a = Link("a", IidLoss(0.5), 10, random.Random(derive_seed(1, "a")))
            b = Link("b", IidLoss(0.5), 10, random.Random(derive_seed(1, "b")))
            out = []
            for i in range(100):
                out.append(a.try_send(1))
                if with_b:
                    b.try_send(1)
            return out

        assert trace_a(False) == trace_a(True)

    def test_ge_state_advances_once_per_send(self):
        model = GilbertElliot(p_g2b=1.0, p_b2g=1.0, loss_good=0.0, loss_bad=1.0)
        link = Link("g", model, 10, random.Random(5))
        # Deterministic alternation: GOOD -> BAD -> GOOD ...
        results = [link.try_send(1) for _ in range(6)]
        assert results == [True, False, True, False, True, False]
        assert model.state == GOOD
