import math

import numpy as np
import pytest

from idevc import mibounds as mb, models, numcore as nc
from idevc.errors import PreconditionError
from naive_refs import (
    naive_club,
    naive_club_cross,
    naive_content_cond_bound,
    naive_infonce,
    naive_loglik,
    naive_nwj,
    naive_style_group_bound,
)


def constant_critic(value):
    return mb.CallableCritic(lambda x, y: np.full((len(x), len(y)), float(value)))


def random_grouped(rng, n_groups, lo=2, hi=5, dim=3):
    labels = []
    for g in range(n_groups):
        labels.extend([g] * rng.integers(lo, hi + 1))
    labels = np.array(labels)
    return rng.normal(size=(labels.size, dim)), labels


class TestNWJ:
    def test_zero_score_gives_minus_inv_e(self):
        rng = np.random.default_rng(0)
        pairs = (rng.normal(size=6), rng.normal(size=6))
        est = mb.nwj_lower(constant_critic(0.0), pairs, pairs)
        assert est.direction == "lower"
        assert abs(est.value - (-math.exp(-1.0))) < 1e-15

    def test_unit_score_gives_zero(self):
        rng = np.random.default_rng(1)
        pairs = (rng.normal(size=4), rng.normal(size=4))
        est = mb.nwj_lower(constant_critic(1.0), pairs, pairs)
        assert abs(est.value) < 1e-15

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(2)
        critic = mb.QuadraticCritic(seed=3)
        for name in critic.params:
            critic.params[name][:] = rng.normal(scale=0.5)
        xj, yj = rng.normal(size=8), rng.normal(size=8)
        xm, ym = rng.normal(size=8), rng.normal(size=8)
        est = mb.nwj_lower(critic, (xj, yj), (xm, ym))
        ref = naive_nwj(critic.pair_scores(xj, yj), critic.pair_scores(xm, ym))
        assert abs(est.value - ref) < 1e-12

    def test_clip_counter_counts_overflowing_scores(self):
        mb.nwj_clip_counter.reset()
        rng = np.random.default_rng(3)
        pairs = (rng.normal(size=4), rng.normal(size=4))
        mb.nwj_lower(constant_critic(100.0), pairs, pairs)
        assert mb.nwj_clip_counter.count == 4

    def test_needs_two_pairs(self):
        with pytest.raises(PreconditionError):
            mb.nwj_lower(constant_critic(0.0), ([1.0], [1.0]), ([1.0], [1.0]))


class TestInfoNCE:
    def test_constant_score_gives_zero(self):
        rng = np.random.default_rng(4)
        est = mb.infonce_lower(constant_critic(2.5), rng.normal(size=5), rng.normal(size=5))
        assert abs(est.value) < 1e-12

    def test_sharp_diagonal_approaches_log_n(self):
        c = 40.0
        critic = mb.CallableCritic(
            lambda x, y: np.where(np.isclose(x.reshape(-1, 1), y.reshape(1, -1)), c, -c)
        )
        vals = np.arange(4.0)
        est = mb.infonce_lower(critic, vals, vals)
        assert abs(est.value - math.log(4.0)) < 1e-12

    def test_never_exceeds_log_n(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 10))
            scores = rng.normal(scale=5.0, size=(n, n))
            critic = mb.CallableCritic(lambda x, y, s=scores: s)
            est = mb.infonce_lower(critic, np.zeros(n), np.zeros(n))
            assert est.value <= math.log(n) + 1e-9

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            scores = rng.normal(scale=2.0, size=(n, n))
            critic = mb.CallableCritic(lambda x, y, s=scores: s)
            est = mb.infonce_lower(critic, np.zeros(n), np.zeros(n))
            assert abs(est.value - naive_infonce(scores)) < 1e-12

    def test_blockwise_matches_full(self):
        rng = np.random.default_rng(7)
        critic = mb.QuadraticCritic(seed=8)
        for name in critic.params:
            critic.params[name][:] = rng.normal(scale=0.3)
        x, y = rng.normal(size=40), rng.normal(size=40)
        full = mb.infonce_lower(critic, x, y)
        block = mb.infonce_value_blockwise(critic, x, y, block=7)
        assert abs(full.value - block) < 1e-10


class TestClubUpper:
    def test_conditioning_independent_logq_gives_zero(self):
        rng = np.random.default_rng(8)
        x, y = rng.normal(size=9), rng.normal(size=9)
        logq = lambda xa, yb: np.repeat(-0.5 * xa**2, yb.shape[0], axis=1)
        est = mb.club_upper(logq, x, y)
        assert est.direction == "upper"
        assert abs(est.value) < 1e-12

    def test_independent_data_true_marginal_gives_zero(self):
        rng = np.random.default_rng(9)
        x, y = rng.normal(size=500), rng.normal(size=500)
        logq = lambda xa, yb: np.repeat(
            -0.5 * (math.log(2 * math.pi) + xa**2), yb.shape[0], axis=1
        )
        est = mb.club_upper(logq, x, y)
        assert abs(est.value) < 1e-12

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            n = int(rng.integers(2, 12))
            table = rng.normal(size=(n, n))
            idx = np.arange(n, dtype=float)
            logq = lambda xa, yb, t=table: t[np.ix_(
                xa[:, 0].astype(int), yb[:, 0].astype(int)
            )]
            est = mb.club_upper(logq, idx, idx, block=3)
            assert abs(est.value - naive_club(table)) < 1e-12


class TestStyleGroupBound:
    def test_all_identical_embeddings(self):
        embeddings = np.ones((6, 3))
        labels = [0, 0, 1, 1, 2, 2]
        est = mb.style_group_bound(embeddings, labels)
        assert abs(est.value - (-math.exp(-1.0))) < 1e-12

    def test_two_distant_tight_groups(self):
        # Within-group distance 0, between-group squared distance 50.
        offset = np.zeros(4)
        far = np.zeros(4)
        far[0] = math.sqrt(50.0)
        embeddings = np.vstack([offset, offset, offset, far, far, far])
        labels = [0, 0, 0, 1, 1, 1]
        est = mb.style_group_bound(embeddings, labels)
        assert abs(est.value - (-math.exp(-1.0) / 2.0)) < 1e-12

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            embeddings, labels = random_grouped(rng, 3)
            est = mb.style_group_bound(embeddings, labels)
            assert abs(est.value - naive_style_group_bound(embeddings, labels)) < 1e-12

    def test_always_negative_and_equal_size_cap(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            m = int(rng.integers(2, 6))
            per = int(rng.integers(2, 5))
            embeddings = rng.normal(scale=rng.uniform(0.1, 4.0), size=(m * per, 4))
            labels = np.repeat(np.arange(m), per)
            est = mb.style_group_bound(embeddings, labels)
            assert est.value < 0.0
            assert est.value <= -math.exp(-1.0) / m + 1e-12

    def test_singleton_group_rejected_by_name(self):
        embeddings = np.zeros((3, 2))
        with pytest.raises(PreconditionError, match="7"):
            mb.style_group_bound(embeddings, [7, 3, 3])


class TestContentCondBound:
    def decoder(self, f_dim=4, s_dim=2, c_dim=3, seed=0):
        bundle = models.init_bundle(models.Dims(f_dim, s_dim, c_dim), seed, hidden_width=5, approx_hidden=5)
        return bundle.decoder

    def test_singleton_groups_give_zero(self):
        rng = np.random.default_rng(13)
        dec = self.decoder()
        x = rng.normal(size=(3, 4))
        c = rng.normal(size=(3, 3))
        s = rng.normal(size=(3, 2))
        est = mb.content_cond_bound(x, c, s, [0, 1, 2], dec)
        assert abs(est.value) < 1e-12

    def test_perfect_reconstruction_saturates_log2(self):
        # N_u = 2 with exact reconstructions and cross distance 50.
        x = np.zeros((2, 4))
        x[1, 0] = math.sqrt(50.0)
        labels = [0, 0]
        node = mb.content_cond_node(nc.constant(x), nc.constant(x.copy()), labels)
        assert abs(node.value[0, 0] - math.log(2.0)) < 1e-12

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(14)
        dec = self.decoder()
        for _ in range(30):
            x, labels = random_grouped(rng, 3, lo=1, hi=4, dim=4)
            c = rng.normal(size=(labels.size, 3))
            s = rng.normal(size=(3, 2))
            est = mb.content_cond_bound(x, c, s, labels, dec)
            decoded = models.mlp_apply(dec, np.hstack([s[labels], c]))
            ref = naive_content_cond_bound(x, decoded, labels)
            assert abs(est.value - ref) < 1e-12

    def test_group_size_ceiling(self):
        rng = np.random.default_rng(15)
        dec = self.decoder()
        for _ in range(100):
            x, labels = random_grouped(rng, int(rng.integers(2, 4)), lo=1, hi=5, dim=4)
            c = rng.normal(size=(labels.size, 3))
            s = rng.normal(size=(np.unique(labels).size, 2))
            est = mb.content_cond_bound(x, c, s, labels, dec)
            counts = np.bincount(labels)
            counts = counts[counts > 0]
            assert est.value <= float((counts * np.log(counts)).sum()) / labels.size + 1e-9
            assert est.value <= math.log(counts.max()) + 1e-9

    def test_invariant_to_constant_score_shift(self):
        rng = np.random.default_rng(16)
        x, labels = random_grouped(rng, 2, lo=2, hi=4, dim=4)
        decoded = rng.normal(size=x.shape)
        node = mb.content_cond_node(nc.constant(x), nc.constant(decoded), labels)
        for shift in (-7.0, 3.5, 120.0):
            # Shifting every score by a constant leaves the value unchanged.
            shifted = naive_content_cond_bound(x, decoded, labels)
            n = labels.size
            explicit = 0.0
            for i in range(n):
                group = [j for j in range(n) if labels[j] == labels[i]]
                scores = [-float(((x[j] - decoded[i]) ** 2).sum()) + shift for j in group]
                own = -float(((x[i] - decoded[i]) ** 2).sum()) + shift
                m = max(scores)
                lme = m + math.log(sum(math.exp(v - m) for v in scores) / len(group))
                explicit += own - lme
            explicit /= n
            assert abs(node.value[0, 0] - shifted) < 1e-12
            assert abs(node.value[0, 0] - explicit) < 1e-9


class TestClubCrossBound:
    def constant_q(self):
        q = models.init_bundle(models.Dims(4, 2, 3), 0, hidden_width=5, approx_hidden=5).approximator
        for net in (q.mean_net, q.var_net):
            for layer in net.layers:
                layer.weight[:] = 0.0
                layer.bias[:] = 0.0
        return q

    def test_content_blind_q_gives_zero(self):
        rng = np.random.default_rng(17)
        q = self.constant_q()
        s = rng.normal(size=(7, 2))
        c = rng.normal(size=(7, 3))
        est = mb.club_cross_bound(s, c, q)
        assert abs(est.value) < 1e-12

    def test_two_pair_hand_calculation(self):
        s = np.array([[0.5], [-1.0]])
        mu = np.array([[0.0], [1.0]])
        var = np.array([[1.0], [4.0]])

        def g(sv, mv, vv):
            return -0.5 * (math.log(2 * math.pi) + math.log(vv) + (sv - mv) ** 2 / vv)

        hand = 0.5 * (g(0.5, 0.0, 1.0) + g(-1.0, 1.0, 4.0)) - 0.25 * (
            g(0.5, 0.0, 1.0) + g(0.5, 1.0, 4.0) + g(-1.0, 0.0, 1.0) + g(-1.0, 1.0, 4.0)
        )
        node = mb.club_cross_node(nc.constant(s), nc.constant(mu), nc.constant(var))
        assert abs(node.value[0, 0] - hand) < 1e-12

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(18)
        q = models.init_bundle(models.Dims(4, 2, 3), 5, hidden_width=5, approx_hidden=5).approximator
        for _ in range(30):
            n = int(rng.integers(2, 12))
            s = rng.normal(size=(n, 2))
            c = rng.normal(size=(n, 3))
            est = mb.club_cross_bound(s, c, q)
            mu, var = models.approx_params(q, c)
            assert abs(est.value - naive_club_cross(s, mu, var)) < 1e-12


class TestApproximatorLoglik:
    def test_standard_normal_at_origin(self):
        node = mb.loglik_node(
            nc.constant([[0.0]]), nc.constant([[0.0]]), nc.constant([[1.0]])
        )
        assert abs(node.value[0, 0] - (-0.5 * math.log(2 * math.pi))) < 1e-12

    def test_at_mode_d_dimensions(self):
        d = 5
        node = mb.loglik_node(
            nc.constant(np.zeros((1, d))), nc.constant(np.zeros((1, d))), nc.constant(np.ones((1, d)))
        )
        assert abs(node.value[0, 0] - (-(d / 2) * math.log(2 * math.pi))) < 1e-12

    def test_matches_naive_sum(self):
        rng = np.random.default_rng(19)
        q = models.init_bundle(models.Dims(4, 2, 3), 9, hidden_width=5, approx_hidden=5).approximator
        s = rng.normal(size=(8, 2))
        c = rng.normal(size=(8, 3))
        val = mb.approximator_loglik(s, c, q)
        mu, var = models.approx_params(q, c)
        assert abs(val - naive_loglik(s, mu, var)) < 1e-12


class TestGapDiagnostic:
    def gaussian_setup(self, rho, n, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=(n, 1))
        s = rho * c + math.sqrt(1 - rho**2) * rng.normal(size=(n, 1))
        cond = lambda sv, cv: -0.5 * (
            np.log(2 * np.pi * (1 - rho**2)) + (sv - rho * cv) ** 2 / (1 - rho**2)
        ).reshape(-1)
        marg = lambda sv: -0.5 * (np.log(2 * np.pi) + sv**2).reshape(-1)
        return s, c, cond, marg, rng

    def true_conditional_q(self, rho):
        # Approximator whose mean net is the exact linear map rho*c and
        # whose variance collapses to floor + softplus(raw) == 1 - rho^2.
        q = models.GaussianApproxParams(
            models.MLPParams(
                [
                    models.Layer(np.array([[1.0]]), np.zeros((1, 1)), "identity"),
                    models.Layer(np.array([[rho]]), np.zeros((1, 1)), "identity"),
                ]
            ),
            models.MLPParams(
                [
                    models.Layer(np.zeros((1, 1)), np.zeros((1, 1)), "identity"),
                    models.Layer(
                        np.zeros((1, 1)),
                        np.array([[math.log(math.expm1(1 - rho**2 - 1e-4))]]),
                        "identity",
                    ),
                ]
            ),
            variance_floor=1e-4,
        )
        return q

    def test_true_conditional_gives_nonpositive_delta(self):
        rho = 0.8
        s, c, cond, marg, rng = self.gaussian_setup(rho, 4000, 20)
        q = self.true_conditional_q(rho)
        delta = mb.club_gap_diagnostic(cond, marg, q, s, c, rng)
        assert delta <= 0.0

    def test_independent_with_marginal_q_gives_zero(self):
        s, c, cond, marg, rng = self.gaussian_setup(0.0, 300, 21)
        q = self.true_conditional_q(0.0)
        delta = mb.club_gap_diagnostic(cond, marg, q, s, c, rng)
        assert abs(delta) < 1e-9


class TestEstimatorGradients:
    def test_style_group_bound_gradient(self):
        rng = np.random.default_rng(22)
        labels = np.repeat(np.arange(3), 3)
        params = {"s": rng.normal(size=(9, 4))}

        def build(p):
            return mb.style_group_bound_node(p["s"], labels)

        assert nc.finite_diff_check(build, params, 1e-5) < 1e-6

    def test_content_cond_gradient(self):
        rng = np.random.default_rng(23)
        labels = np.array([0, 0, 1, 1, 1])
        x = rng.normal(size=(5, 4))
        params = {"decoded": rng.normal(size=(5, 4))}

        def build(p):
            return mb.content_cond_node(nc.constant(x), p["decoded"], labels)

        assert nc.finite_diff_check(build, params, 1e-5) < 1e-6

    def test_club_cross_gradient(self):
        rng = np.random.default_rng(24)
        params = {
            "s": rng.normal(size=(5, 3)),
            "mu": rng.normal(size=(5, 3)),
            "raw": rng.normal(size=(5, 3)),
        }

        def build(p):
            var = nc.add(nc.softplus(p["raw"]), nc.constant(np.full((1, 3), 1e-4)))
            return mb.club_cross_node(p["s"], p["mu"], var)

        assert nc.finite_diff_check(build, params, 1e-5) < 1e-6

    def test_nwj_infonce_critic_gradients(self):
        rng = np.random.default_rng(25)
        critic = mb.QuadraticCritic(seed=1)
        for name in critic.params:
            critic.params[name][:] = rng.normal(scale=0.5)
        x, y = rng.normal(size=(8, 1)), rng.normal(size=(8, 1))
        xm, ym = rng.normal(size=(8, 1)), rng.normal(size=(8, 1))
        params = {f"critic.{k}": v for k, v in critic.params.items()}

        def wrap(p):
            out = {k.split(".", 1)[1]: p[k] for k in p}
            for name in critic.params:
                out.setdefault(name, nc.constant(critic.params[name], name=name))
            return out

        def build_nwj(p):
            w = wrap(p)
            return mb.nwj_node(
                critic, w, nc.constant(x), nc.constant(y), nc.constant(xm), nc.constant(ym)
            )

        def build_nce(p):
            return mb.infonce_node(critic, wrap(p), nc.constant(x), nc.constant(y))

        assert nc.finite_diff_check(build_nwj, params, 1e-5) < 1e-6
        # InfoNCE is exactly invariant to any additive score term that depends
        # only on x_i (it cancels between the paired score and the row
        # log-mean-exp), so the b/wx/wxx gradients are identically zero and
        # excluded from the relative check.
        nce_params = {k: params[k] for k in ("critic.wy", "critic.wyy", "critic.wxy")}
        assert nc.finite_diff_check(build_nce, nce_params, 1e-5) < 1e-6

    def test_infonce_gradient_through_inputs(self):
        rng = np.random.default_rng(26)
        critic = mb.QuadraticCritic(seed=2)
        for name in critic.params:
            critic.params[name][:] = rng.normal(scale=0.5)
        params = {"x": rng.normal(size=(6, 1)), "y": rng.normal(size=(6, 1))}

        def build(p):
            return mb.infonce_node(critic, critic.leaves(trainable=False), p["x"], p["y"])

        assert nc.finite_diff_check(build, params, 1e-5) < 1e-6
