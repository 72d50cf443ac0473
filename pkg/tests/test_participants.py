import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capmkt.participants import (
    AdmmTerms,
    ConsumerBlock,
    GeneratorTech,
    TimeGrid,
    UnboundedBestResponse,
    consumer_best_response,
    generator_best_response,
)

PEAKER_A = dict(a_quad=0.04, b_lin=90.0, capex=60_000.0)


def peaker(existing=0.0, availability=1.0):
    return GeneratorTech(id="peak_A", zone="A", existing=existing,
                         availability=availability, **PEAKER_A)


def gen_profit(tech, grid, lam, dec, cm_price=0.0):
    margin = (lam - tech.marginal_cost(dec.dispatch) / 2 - tech.b_lin / 2)
    # explicit: revenue - variable cost - investment + capacity revenue
    rev = float(np.sum(grid.weights * lam * dec.dispatch))
    var = float(np.sum(grid.weights * tech.variable_cost(dec.dispatch)))
    inv = tech.capex * (dec.capacity - tech.existing)
    del margin
    return rev - var - inv + cm_price * dec.cm_offer


class TestGeneratorBestResponse:
    def test_no_profitable_operation(self):
        grid = TimeGrid(np.full(4, 2190.0))
        lam = np.full(4, 80.0)  # below marginal cost at zero output
        dec = generator_best_response(peaker(), grid, lam, cm_price=0.0)
        assert np.allclose(dec.dispatch, 0.0, atol=1e-7)
        assert dec.capacity == pytest.approx(0.0, abs=1e-7)
        assert dec.cm_offer == pytest.approx(0.0, abs=1e-7)

    def test_interior_stationarity(self):
        # one step, lam=290: g = (290 - 90) / 0.04 = 5000 MW
        grid = TimeGrid([8760.0])
        dec = generator_best_response(peaker(existing=6000.0), grid, [290.0])
        assert dec.dispatch[0] == pytest.approx(5000.0, rel=1e-9)
        assert dec.capacity == pytest.approx(6000.0)

    def test_kkt_residual(self):
        grid = TimeGrid([100.0, 8000.0, 660.0])
        dec = generator_best_response(peaker(), grid, [300.0, 95.0, 2000.0])
        assert dec.meta["kkt_residual"] <= 1e-6

    def test_capacity_shadow_value_scan(self):
        # brute-force 1-D scan over y against the returned optimum
        grid = TimeGrid([20.0, 8740.0])
        lam = np.array([4000.0, 60.0])
        tech = peaker()
        dec = generator_best_response(tech, grid, lam)

        def profit_at(y):
            g = np.clip((lam - tech.b_lin) / tech.a_quad, 0.0, y)
            rev = np.sum(grid.weights * (lam * g - tech.variable_cost(g)))
            return rev - tech.capex * y

        ys = np.linspace(0.0, 40_000.0, 200_001)
        vals = np.array([profit_at(y) for y in ys])
        y_brute = ys[int(np.argmax(vals))]
        assert dec.capacity == pytest.approx(y_brute, abs=0.5)
        # marginal scarcity rent equals capex at the optimum
        rent = grid.weights[0] * (lam[0] - tech.marginal_cost(dec.capacity))
        assert rent == pytest.approx(tech.capex, rel=1e-6)

    def test_unbounded_zero_capex(self):
        grid = TimeGrid([8760.0])
        tech = GeneratorTech(id="free", zone="A", a_quad=0.0, b_lin=10.0, capex=0.0)
        with pytest.raises(UnboundedBestResponse, match="bound"):
            generator_best_response(tech, grid, [50.0])

    def test_cm_offer_tracks_price(self):
        grid = TimeGrid(np.full(3, 2920.0))
        lam = np.array([200.0, 150.0, 95.0])
        dec = generator_best_response(peaker(), grid, lam, cm_price=50_000.0)
        # positive capacity price: every built MW is offered
        assert dec.cm_offer == pytest.approx(dec.capacity, rel=1e-9)
        assert dec.capacity > 1000.0

    def test_unbounded_capacity_price(self):
        # capacity remuneration above CONE with no penalty is unbounded
        grid = TimeGrid(np.full(3, 2920.0))
        with pytest.raises(UnboundedBestResponse, match="capacity"):
            generator_best_response(peaker(), grid, [95.0, 95.0, 95.0],
                                    cm_price=70_000.0)

    def test_feasibility_invariants(self):
        grid = TimeGrid([10.0, 4000.0, 4750.0])
        af = np.array([1.0, 0.7, 0.3])
        tech = peaker(existing=500.0, availability=af)
        terms = AdmmTerms(rho_energy=0.1, energy_anchor=np.array([900.0, 300.0, 100.0]),
                          rho_capacity=40.0, capacity_anchor=800.0)
        dec = generator_best_response(tech, grid, [500.0, 140.0, 100.0],
                                      cm_price=50_000.0, admm_terms=terms)
        assert np.all(dec.dispatch >= -1e-9)
        assert np.all(dec.dispatch <= af * dec.capacity + 1e-9)
        assert -1e-9 <= dec.cm_offer <= dec.capacity + 1e-9
        assert dec.capacity >= tech.existing - 1e-9

    def test_perturbation_never_improves(self):
        grid = TimeGrid([50.0, 5000.0, 3710.0])
        lam = np.array([900.0, 120.0, 101.0])
        tech = peaker()
        dec = generator_best_response(tech, grid, lam)
        base = gen_profit(tech, grid, lam, dec)
        scale = max(abs(base), 1.0)
        rng = np.random.default_rng(5)
        for _ in range(50):
            d2 = np.clip(dec.dispatch + rng.choice([-1.0, 1.0], 3), 0.0, None)
            y2 = max(dec.capacity + rng.choice([-1.0, 1.0]), 0.0)
            d2 = np.minimum(d2, y2)
            from capmkt.participants import GeneratorDecision
            alt = GeneratorDecision(dispatch=d2, capacity=y2)
            assert gen_profit(tech, grid, lam, alt) <= base + 1e-6 * scale

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 500.0), st.floats(0.0, 500.0))
    def test_dispatch_monotone_in_price(self, lam1, lam2):
        grid = TimeGrid([8760.0])
        tech = peaker(existing=4000.0)
        d1 = generator_best_response(tech, grid, [lam1]).dispatch[0]
        d2 = generator_best_response(tech, grid, [lam2]).dispatch[0]
        if lam1 <= lam2:
            assert d1 <= d2 + 1e-6
        else:
            assert d2 <= d1 + 1e-6


class TestConsumerBestResponse:
    def block(self, D=10_000.0, eps=0.2, wtp=20_000.0, T=1):
        return ConsumerBlock(zone="A", ref_demand=np.full(T, D),
                             elastic_share=eps, wtp=wtp)

    def test_zero_price_full_elastic(self):
        grid = TimeGrid([8760.0])
        dec = consumer_best_response(self.block(), grid, [0.0])
        assert dec.elastic[0] == pytest.approx(2000.0)
        assert dec.ens[0] == pytest.approx(0.0)

    def test_price_at_wtp_boundary(self):
        grid = TimeGrid([8760.0])
        dec = consumer_best_response(self.block(), grid, [20_000.0])
        assert dec.elastic[0] == pytest.approx(0.0, abs=1e-9)
        # indifferent at wtp: tie broken toward serving
        assert dec.ens[0] == pytest.approx(0.0, abs=1e-9)
        assert dec.inelastic[0] == pytest.approx(8000.0)

    def test_elastic_closed_form_at_cap(self):
        grid = TimeGrid([8760.0])
        dec = consumer_best_response(self.block(), grid, [4000.0])
        assert dec.elastic[0] == pytest.approx(0.2 * 10_000.0 * (1 - 0.2), rel=1e-12)

    def test_shedding_above_market_value(self):
        grid = TimeGrid([8760.0])
        blk = self.block()
        blk.bid_cap = 4000.0
        dec = consumer_best_response(blk, grid, [4001.0])
        assert dec.ens[0] == pytest.approx(8000.0)
        assert dec.inelastic[0] == pytest.approx(0.0)

    def test_invariants_with_admm(self):
        grid = TimeGrid(np.full(4, 2190.0))
        blk = ConsumerBlock(zone="B", ref_demand=np.array([5e3, 8e3, 1e4, 3e3]),
                            elastic_share=0.2, wtp=20_000.0)
        terms = AdmmTerms(rho_energy=0.1,
                          energy_anchor=np.array([4e3, 9e3, 9e3, 2e3]))
        dec = consumer_best_response(blk, grid, [50.0, 400.0, 19_000.0, 0.0], terms)
        assert np.allclose(dec.inelastic + dec.elastic, dec.demand)
        assert np.allclose(dec.inelastic + dec.ens, blk.inelastic_ref())
        assert np.all(dec.elastic >= -1e-9)
        assert np.all(dec.elastic <= blk.elastic_cap() + 1e-9)
        assert np.all(dec.ens >= -1e-9)

    def test_admm_solution_matches_qp_kernel(self):
        from capmkt.qp import solve_qp
        grid = TimeGrid(np.array([100.0, 8660.0]))
        blk = ConsumerBlock(zone="C", ref_demand=np.array([9e3, 6e3]),
                            elastic_share=0.25, wtp=15_000.0, bid_cap=3000.0)
        terms = AdmmTerms(rho_energy=0.5, energy_anchor=np.array([8.5e3, 6.2e3]))
        dec = consumer_best_response(blk, grid, [2800.0, 120.0], terms)
        for t in range(2):
            W = grid.weights[t]
            ce = W * blk.wtp / blk.elastic_cap()[t]
            rho_w = W * terms.rho_energy
            P = np.array([[ce + rho_w, rho_w], [rho_w, rho_w]])
            lam = [2800.0, 120.0][t]
            q = np.array([W * (lam - blk.wtp) - rho_w * terms.energy_anchor[t],
                          W * (lam - blk.market_value) - rho_w * terms.energy_anchor[t]])
            ref = solve_qp(P, q, lb=[0, 0],
                           ub=[blk.elastic_cap()[t], blk.inelastic_ref()[t]])
            assert dec.elastic[t] == pytest.approx(ref.x[0], abs=1e-5)
            assert dec.inelastic[t] == pytest.approx(ref.x[1], abs=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 25_000.0), st.floats(0.0, 25_000.0))
    def test_elastic_monotone_in_price(self, lam1, lam2):
        grid = TimeGrid([8760.0])
        blk = self.block()
        d1 = consumer_best_response(blk, grid, [lam1]).elastic[0]
        d2 = consumer_best_response(blk, grid, [lam2]).elastic[0]
        if lam1 <= lam2:
            assert d2 <= d1 + 1e-9
        else:
            assert d1 <= d2 + 1e-9


class TestConsumerEnumerationAgainstKernel:
    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 21_000.0), st.floats(-2000.0, 12_000.0),
           st.floats(0.01, 5.0), st.floats(0.05, 0.9),
           st.floats(1000.0, 20_000.0), st.floats(500.0, 4000.0))
    def test_matches_qp_kernel(self, lam, anchor, rho, eps, D, bid_cap):
        from capmkt.qp import solve_qp
        grid = TimeGrid([1000.0])
        blk = ConsumerBlock(zone="Z", ref_demand=np.array([D]),
                            elastic_share=eps, wtp=20_000.0, bid_cap=bid_cap)
        terms = AdmmTerms(rho_energy=rho, energy_anchor=np.array([anchor]))
        dec = consumer_best_response(blk, grid, [lam], terms)
        W = 1000.0
        emax = blk.elastic_cap()[0]
        imax = blk.inelastic_ref()[0]
        ce = W * blk.wtp / emax
        rho_w = W * rho
        P = np.array([[ce + rho_w, rho_w], [rho_w, rho_w]])
        q = np.array([W * (lam - blk.wtp) - rho_w * anchor,
                      W * (lam - blk.market_value) - rho_w * anchor])
        ref = solve_qp(P, q, lb=[0.0, 0.0], ub=[emax, imax])
        scale = max(1.0, emax + imax)
        assert abs(dec.elastic[0] - ref.x[0]) <= 1e-6 * scale
        assert abs(dec.inelastic[0] - ref.x[1]) <= 1e-6 * scale


class TestGeneratorKktProperty:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 6000.0), min_size=3, max_size=3),
           st.floats(0.0, 55_000.0))
    def test_kkt_residual_bounded(self, lam, cm_price):
        grid = TimeGrid([100.0, 8000.0, 660.0])
        terms = AdmmTerms(rho_energy=0.2, energy_anchor=np.array([500., 300., 100.]),
                          rho_capacity=8.0, capacity_anchor=400.0)
        dec = generator_best_response(peaker(), grid, lam, cm_price=cm_price,
                                      admm_terms=terms)
        assert dec.meta["kkt_residual"] <= 1e-6
        af = np.ones(3)
        assert np.all(dec.dispatch <= af * dec.capacity + 1e-9)
