import numpy as np
import pytest

from capmkt.market_clearing import (
    CapacityOffer,
    DemandBid,
    InfeasibleClearingError,
    SupplyOffer,
    build_scarcity_scenarios,
    clear_capacity_market_fbmc,
    clear_capacity_market_nocbp,
    clear_capacity_market_ntc,
    clear_energy_market_step,
    compute_capacity_demand,
    export_witness_csv,
)
from capmkt.network import Line, Network, NTCBox, build_ptdf
from capmkt.scenario_io import ProfileSet, synthesize_case_study


def two_zone_net(f_max=5000.0):
    return Network(
        nodes=("n1", "n2"),
        lines=(Line("n1", "n2", 1.0, f_max),),
        zones=("Z1", "Z2"),
        node_zone={"n1": "Z1", "n2": "Z2"},
        demand_share={"n1": 1.0, "n2": 1.0},
    )


def bid(zone, inelastic, value=20_000.0, elastic=1000.0, wtp=20_000.0):
    return DemandBid(zone=zone, inelastic_mw=inelastic, inelastic_value=value,
                     elastic_cap_mw=elastic, wtp=wtp)


class TestEnergyStep:
    def test_uncongested_single_price(self):
        net = two_zone_net(f_max=50_000.0)
        ptdf = build_ptdf(net, "n1")
        offers = [SupplyOffer("g1", "Z1", 0.01, 20.0, 8000.0),
                  SupplyOffer("g2", "Z2", 0.01, 20.0, 8000.0)]
        bids = [bid("Z1", 5000.0), bid("Z2", 1000.0)]
        out = clear_energy_market_step(0, offers, bids, net, ptdf,
                                       {"Z1": 8000.0, "Z2": 8000.0}, 20_000.0)
        # identical techs, no congestion: law of one price, split production
        assert out.prices[0] == pytest.approx(out.prices[1], rel=1e-6)
        assert out.dispatch["g1"] == pytest.approx(out.dispatch["g2"], rel=1e-4)
        assert out.net_positions[0] < 0 < out.net_positions[1]
        assert np.allclose(out.ens, 0.0, atol=1e-6)

    def test_congested_border_rent(self):
        net = two_zone_net(f_max=500.0)
        ptdf = build_ptdf(net, "n1")
        # cheap exporter Z1, expensive importer Z2
        offers = [SupplyOffer("cheap", "Z1", 0.001, 10.0, 10_000.0),
                  SupplyOffer("dear", "Z2", 0.001, 100.0, 10_000.0)]
        bids = [bid("Z1", 2000.0, elastic=100.0), bid("Z2", 4000.0, elastic=100.0)]
        out = clear_energy_market_step(0, offers, bids, net, ptdf,
                                       {"Z1": 10_000.0, "Z2": 10_000.0}, 20_000.0)
        assert out.net_positions[0] == pytest.approx(500.0, abs=1e-4)
        assert out.prices[1] > out.prices[0]
        rent = -float(out.prices @ out.net_positions)
        assert rent == pytest.approx((out.prices[1] - out.prices[0]) * 500.0, rel=1e-6)
        assert rent > 0
        # exporter price equals its marginal cost at the cleared output
        mc = 10.0 + 0.001 * out.dispatch["cheap"]
        assert out.prices[0] == pytest.approx(mc, rel=1e-6)

    def test_cap_binds_with_rationing(self):
        net = two_zone_net(f_max=500.0)
        ptdf = build_ptdf(net, "n1")
        offers = [SupplyOffer("g1", "Z1", 0.01, 20.0, 1000.0),
                  SupplyOffer("g2", "Z2", 0.01, 20.0, 1000.0)]
        bids = [bid("Z1", 3000.0, value=4000.0, elastic=200.0),
                bid("Z2", 3000.0, value=4000.0, elastic=200.0)]
        out = clear_energy_market_step(0, offers, bids, net, ptdf,
                                       {"Z1": 1000.0, "Z2": 1000.0}, 4000.0)
        assert np.allclose(out.prices, 4000.0, rtol=1e-9)
        assert np.all(out.ens > 100.0)
        # complementarity: rationing only at capped prices
        for j in range(2):
            if out.ens[j] > 1e-6:
                assert out.prices[j] == pytest.approx(4000.0)

    def test_infeasible_allocation_names_zone(self):
        net = two_zone_net()
        ptdf = build_ptdf(net, "n1")
        offers = [SupplyOffer("g1", "Z1", 0.01, 20.0, 9000.0)]
        bids = [bid("Z1", 100.0), bid("Z2", 100.0)]
        with pytest.raises(InfeasibleClearingError, match="zone Z1"):
            clear_energy_market_step(0, offers, bids, net, ptdf,
                                     {"Z1": 5000.0, "Z2": 5000.0}, 20_000.0)


class TestScarcityScenarios:
    def test_simultaneous_targets(self, four_node_network):
        peaks = {"A": 19_000.0, "B": 16_000.0, "C": 18_000.0}
        scen = build_scarcity_scenarios(peaks, four_node_network)
        assert len(scen) == len(four_node_network.zones) + 1
        sim = scen[0]
        zonal = sim.zonal_totals(four_node_network)
        assert np.allclose(zonal, [18_050.0, 15_200.0, 17_100.0])
        # zone A nodal split follows demand shares
        assert sim.nodal_capacity_demand[0] == pytest.approx(9_025.0)

    def test_zonal_scenario(self, four_node_network):
        peaks = {"A": 19_000.0, "B": 16_000.0, "C": 18_000.0}
        scen = {s.id: s for s in build_scarcity_scenarios(peaks, four_node_network)}
        za = scen["zonal-A"].zonal_totals(four_node_network)
        assert np.allclose(za, [19_000.0, 14_400.0, 16_200.0])

    def test_zero_peaks(self, four_node_network):
        scen = build_scarcity_scenarios({"A": 0.0, "B": 0.0, "C": 0.0},
                                        four_node_network)
        for s in scen:
            assert np.allclose(s.nodal_capacity_demand, 0.0)


class TestCapacityDemand:
    def test_closed_form_flat_demand(self):
        ps = ProfileSet(zones=("Z",), demand={"Z": np.full(3, 10_000.0)},
                        availability={}, renewable_caps={})
        out = compute_capacity_demand("CM-NoCBP", ps, eps=0.2, wtp=20_000.0,
                                      price_cap=4_000.0)
        expected = 0.8 * 10_000.0 + 0.2 * 10_000.0 * (1 - 0.2)
        assert out["Z"] == pytest.approx(expected)

    def test_implicit_equals_nocbp_without_imports(self, four_node_network):
        profiles, _ = synthesize_case_study()
        base = compute_capacity_demand("CM-NoCBP", profiles, eps=0.2,
                                       wtp=20_000.0, price_cap=4_000.0)
        from capmkt.market_clearing import CapacityMarketOutcome
        fb = CapacityMarketOutcome(
            zones=four_node_network.zones,
            prices=np.zeros(3), zonal_demand=np.zeros(3), cleared_offers={},
            zonal_cleared=np.zeros(3), net_obligation=np.zeros(3),
            scenario_ids=("simultaneous", "zonal-A", "zonal-B", "zonal-C"),
            scarcity_injections=np.zeros((4, 4)),
            scarcity_dispatch=np.zeros((4, 4)),
            scarcity_flows=np.zeros((4, 4)))
        out = compute_capacity_demand("CM-Implicit", profiles, eps=0.2,
                                      wtp=20_000.0, price_cap=4_000.0,
                                      fbmc_result=fb, network=four_node_network)
        for z in base:
            assert out[z] == pytest.approx(base[z])

    def test_implicit_subtracts_imports(self, four_node_network):
        profiles, _ = synthesize_case_study()
        base = compute_capacity_demand("CM-NoCBP", profiles, eps=0.2,
                                       wtp=20_000.0, price_cap=4_000.0)
        from capmkt.market_clearing import CapacityMarketOutcome
        inj = np.zeros((4, 4))
        inj[3] = np.array([500.0, 500.0, 0.0, -1000.0])  # zonal-C: C imports 1 GW
        fb = CapacityMarketOutcome(
            zones=four_node_network.zones,
            prices=np.zeros(3), zonal_demand=np.zeros(3), cleared_offers={},
            zonal_cleared=np.zeros(3), net_obligation=np.zeros(3),
            scenario_ids=("simultaneous", "zonal-A", "zonal-B", "zonal-C"),
            scarcity_injections=inj,
            scarcity_dispatch=np.zeros((4, 4)),
            scarcity_flows=np.zeros((4, 4)))
        out = compute_capacity_demand("CM-Implicit", profiles, eps=0.2,
                                      wtp=20_000.0, price_cap=4_000.0,
                                      fbmc_result=fb, network=four_node_network)
        assert out["C"] == pytest.approx(base["C"] - 1000.0)
        assert out["A"] == pytest.approx(base["A"])


class TestCapacityClearings:
    def test_nocbp_zero_demand(self):
        out = clear_capacity_market_nocbp(
            [CapacityOffer("g1", "Z", 1000.0, 60_000.0)], {"Z": 0.0})
        assert out.prices[0] == 0.0
        assert out.zonal_cleared[0] == 0.0

    def test_nocbp_merit_order(self):
        offers = [CapacityOffer("cheap", "Z", 500.0, 50_000.0),
                  CapacityOffer("dear", "Z", 500.0, 90_000.0)]
        out = clear_capacity_market_nocbp(offers, {"Z": 400.0})
        assert out.prices[0] == 50_000.0
        out = clear_capacity_market_nocbp(offers, {"Z": 700.0})
        assert out.prices[0] == 90_000.0
        assert out.cleared_offers["cheap"] == pytest.approx(500.0)
        assert out.cleared_offers["dear"] == pytest.approx(200.0)

    def test_nocbp_cone_anchor(self):
        offers = [CapacityOffer(f"peak_{z}", z, 10_000.0, cone)
                  for z, cone in [("A", 60_000.0), ("B", 70_000.0), ("C", 80_000.0)]]
        out = clear_capacity_market_nocbp(offers, {"A": 5000.0, "B": 5000.0,
                                                   "C": 5000.0})
        assert np.allclose(out.prices, [60_000.0, 70_000.0, 80_000.0])

    def test_nocbp_insufficient(self):
        with pytest.raises(InfeasibleClearingError, match="exceeds offered"):
            clear_capacity_market_nocbp(
                [CapacityOffer("g", "Z", 100.0, 0.0)], {"Z": 500.0})

    def test_fbmc_two_zone_single_price(self):
        # identical CONE, huge line: one price; the short zone imports
        net = two_zone_net(f_max=50_000.0)
        ptdf = build_ptdf(net, "n1")
        scen = build_scarcity_scenarios({"Z1": 1000.0, "Z2": 1000.0}, net)
        offers = [CapacityOffer("g1", "Z1", 5000.0, 60_000.0),
                  CapacityOffer("g2", "Z2", 800.0, 60_000.0)]
        caps = np.array([5000.0, 5000.0])
        out = clear_capacity_market_fbmc(offers, {"Z1": 1000.0, "Z2": 1000.0},
                                         scen, net, ptdf, caps)
        assert out.prices[0] == pytest.approx(out.prices[1], abs=1.0)
        assert out.prices[0] == pytest.approx(60_000.0, rel=1e-6)
        assert out.net_obligation[0] == pytest.approx(200.0, abs=1e-4)
        assert float(out.net_obligation.sum()) == pytest.approx(0.0, abs=1e-6)
        assert out.cleared_offers["g1"] == pytest.approx(1200.0, abs=1e-4)

    def test_fbmc_import_bounded_by_scenario_demand(self):
        # the scenario balances cap reliance on imports at the smallest
        # scenario demand of the importing zone
        net = two_zone_net(f_max=50_000.0)
        ptdf = build_ptdf(net, "n1")
        scen = build_scarcity_scenarios({"Z1": 1000.0, "Z2": 1000.0}, net)
        offers = [CapacityOffer("g1", "Z1", 5000.0, 50_000.0),
                  CapacityOffer("g2", "Z2", 5000.0, 80_000.0)]
        caps = np.array([5000.0, 5000.0])
        out = clear_capacity_market_fbmc(offers, {"Z1": 1000.0, "Z2": 1000.0},
                                         scen, net, ptdf, caps)
        assert out.net_obligation[1] == pytest.approx(-900.0, abs=1e-4)
        assert out.prices[1] == pytest.approx(80_000.0, rel=1e-6)

    def test_fbmc_zero_line_decouples(self):
        net = two_zone_net(f_max=1e-3)
        ptdf = build_ptdf(net, "n1")
        scen = build_scarcity_scenarios({"Z1": 1000.0, "Z2": 900.0}, net)
        offers = [CapacityOffer("g1", "Z1", 5000.0, 50_000.0),
                  CapacityOffer("g2", "Z2", 5000.0, 80_000.0)]
        caps = np.array([5000.0, 5000.0])
        demand = {"Z1": 1000.0, "Z2": 900.0}
        out = clear_capacity_market_fbmc(offers, demand, scen, net, ptdf, caps)
        ref = clear_capacity_market_nocbp(offers, demand)
        assert np.allclose(out.prices, ref.prices, atol=1.0)
        assert np.allclose(out.net_obligation, 0.0, atol=1e-2)

    def test_fbmc_witness_and_revenue_adequacy(self, four_node_network,
                                               four_node_ptdf, tmp_path):
        peaks = {"A": 4000.0, "B": 3000.0, "C": 3500.0}
        scen = build_scarcity_scenarios(peaks, four_node_network)
        offers = [CapacityOffer("pA", "A", 9000.0, 60_000.0),
                  CapacityOffer("pB", "B", 9000.0, 70_000.0),
                  CapacityOffer("pC", "C", 9000.0, 80_000.0)]
        caps = np.array([4500.0, 4500.0, 4000.0, 4000.0])
        demand = {"A": 4000.0, "B": 3000.0, "C": 3500.0}
        out = clear_capacity_market_fbmc(offers, demand, scen, four_node_network,
                                         four_node_ptdf, caps)
        # consumer payments = generator revenue - operator obligation revenue
        payments = float(out.prices @ out.zonal_demand)
        revenue = float(out.prices @ out.zonal_cleared)
        congestion = -float(out.prices @ out.net_obligation)
        assert payments == pytest.approx(revenue + congestion, rel=1e-9)
        # stored witnesses satisfy network limits
        fmax = four_node_network.f_max_vector()
        for s in range(len(out.scenario_ids)):
            assert np.all(np.abs(out.scarcity_flows[s]) <= fmax + 1e-6)
            assert np.all(out.scarcity_dispatch[s] <= out.nodal_allocation + 1e-6)
        export_witness_csv(out, four_node_network, tmp_path / "witness.csv")
        assert (tmp_path / "witness.csv").read_text().count("\n") > 10

    def test_ntc_zero_box_matches_nocbp(self, four_node_network):
        scen = build_scarcity_scenarios({"A": 3000.0, "B": 2500.0, "C": 2800.0},
                                        four_node_network)
        box = NTCBox(tuple(four_node_network.borders()), np.zeros(3), np.zeros(3))
        offers = [CapacityOffer("pA", "A", 9000.0, 60_000.0),
                  CapacityOffer("pB", "B", 9000.0, 70_000.0),
                  CapacityOffer("pC", "C", 9000.0, 80_000.0)]
        demand = {"A": 3000.0, "B": 2500.0, "C": 2800.0}
        out = clear_capacity_market_ntc(offers, demand, scen, box,
                                        four_node_network)
        ref = clear_capacity_market_nocbp(offers, demand)
        assert np.allclose(out.prices, ref.prices, atol=1.0)
        assert np.allclose(out.net_obligation, 0.0, atol=1e-6)
        assert np.allclose(out.zonal_cleared, ref.zonal_cleared, atol=1e-6)

    def test_ntc_large_box_cost_below_nocbp(self, four_node_network):
        scen = build_scarcity_scenarios({"A": 3000.0, "B": 2500.0, "C": 2800.0},
                                        four_node_network)
        box = NTCBox(tuple(four_node_network.borders()),
                     np.full(3, 10_000.0), np.full(3, 10_000.0))
        offers = [CapacityOffer("pA", "A", 20_000.0, 60_000.0),
                  CapacityOffer("pB", "B", 20_000.0, 70_000.0),
                  CapacityOffer("pC", "C", 20_000.0, 80_000.0)]
        demand = {"A": 3000.0, "B": 2500.0, "C": 2800.0}
        out = clear_capacity_market_ntc(offers, demand, scen, box,
                                        four_node_network)
        ref = clear_capacity_market_nocbp(offers, demand)

        def cost(o):
            return sum(o.cleared_offers[f"p{z}"] * price
                       for z, price in [("A", 60_000.0), ("B", 70_000.0),
                                        ("C", 80_000.0)])

        assert cost(out) <= cost(ref) + 1e-3
        # with an unbounded box everything clears on the cheapest offers,
        # limited only by zonal deliverability of the scarcity demand
        assert out.net_obligation[0] > 0


class TestRevenueAdequacy:
    def test_energy_step_identity(self, four_node_network, four_node_ptdf):
        # consumer payments = generator revenue + renewable revenue
        # - exporter payments (merchandising surplus), exactly
        offers = [SupplyOffer("gA", "A", 0.01, 20.0, 9000.0),
                  SupplyOffer("gB", "B", 0.02, 35.0, 6000.0),
                  SupplyOffer("gC", "C", 0.03, 50.0, 6000.0)]
        bids = [bid("A", 7000.0, elastic=1500.0), bid("B", 5200.0, elastic=1000.0),
                bid("C", 6100.0, elastic=1200.0)]
        renew = {"A": 800.0, "B": 300.0, "C": 500.0}
        out = clear_energy_market_step(
            0, offers, bids, four_node_network, four_node_ptdf,
            {"A": 9000.0, "B": 6000.0, "C": 6000.0}, 20_000.0,
            renewables=renew)
        zones = four_node_network.zones
        payments = float(np.sum(out.prices * (out.elastic + out.inelastic)))
        gen_rev = sum(out.prices[zones.index(o.zone)] * out.dispatch[o.gen_id]
                      for o in offers)
        ren_rev = float(np.sum(out.prices * np.array([renew[z] for z in zones])))
        congestion = -float(out.prices @ out.net_positions)
        assert payments == pytest.approx(gen_rev + ren_rev + congestion,
                                         rel=1e-9)
        assert congestion >= -1e-6


class TestEdgeCases:
    def test_capacity_demand_floored_with_warning(self, caplog):
        import logging
        ps = ProfileSet(zones=("Z",), demand={"Z": np.full(2, 100.0)},
                        availability={("wind", "Z"): np.full(2, 1.0)},
                        renewable_caps={("wind", "Z"): 50_000.0})
        with caplog.at_level(logging.WARNING):
            out = compute_capacity_demand("CM-NoCBP", ps, eps=0.2,
                                          wtp=20_000.0, price_cap=4_000.0)
        assert out["Z"] == 0.0
        assert any("floored" in r.message for r in caplog.records)

    def test_fbmc_infeasible_lists_shortfall(self, four_node_network,
                                             four_node_ptdf):
        scen = build_scarcity_scenarios({"A": 5000.0, "B": 5000.0, "C": 5000.0},
                                        four_node_network)
        offers = [CapacityOffer("pA", "A", 20_000.0, 60_000.0)]
        caps = np.array([100.0, 100.0, 100.0, 100.0])  # far too little
        with pytest.raises(InfeasibleClearingError) as err:
            clear_capacity_market_fbmc(offers, {"A": 5000.0, "B": 5000.0,
                                                "C": 5000.0},
                                       scen, four_node_network,
                                       four_node_ptdf, caps)
        assert "exceeds" in str(err.value)
        assert err.value.detail["checks"]
