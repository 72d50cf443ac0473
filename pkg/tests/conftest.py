import numpy as np
import pytest
from scipy.optimize import linprog

from capmkt.equilibrium import ADMMConfig
from capmkt.network import Line, Network, build_ptdf
from capmkt.participants import GeneratorTech
from capmkt.scenario_io import ProfileSet, build_case, synthesize_case_study


def toy_two_zone_case():
    """Two-zone, three-node toy with three technologies and one stress hour."""
    net = Network(
        nodes=("na", "nb", "nc"),
        lines=(Line("na", "nb", 1.0, 2000.0), Line("nb", "nc", 1.0, 800.0),
               Line("na", "nc", 1.0, 800.0)),
        zones=("Z1", "Z2"),
        node_zone={"na": "Z1", "nb": "Z1", "nc": "Z2"},
        demand_share={"na": 0.6, "nb": 0.4, "nc": 1.0},
    )
    d1 = np.array([2600.0, 2400.0, 2200.0, 2500.0, 2900.0, 3200.0, 3000.0, 4200.0])
    d2 = np.array([2000.0, 1900.0, 1800.0, 2000.0, 2300.0, 2600.0, 2500.0, 3400.0])
    weights = np.full(8, (8760.0 - 4.0) / 7)
    weights[7] = 4.0
    profiles = ProfileSet(zones=("Z1", "Z2"), demand={"Z1": d1, "Z2": d2},
                          availability={}, renewable_caps={}, weights=weights)
    techs = [
        GeneratorTech(id="base_Z1", zone="Z1", a_quad=0.008, b_lin=20.0,
                      capex=190_000.0),
        GeneratorTech(id="peak_Z1", zone="Z1", a_quad=0.04, b_lin=90.0,
                      capex=60_000.0),
        GeneratorTech(id="peak_Z2", zone="Z2", a_quad=0.06, b_lin=90.0,
                      capex=70_000.0),
    ]
    return build_case(profiles, net, eps=0.2, wtp=20_000.0, techs=techs)


@pytest.fixture(scope="session")
def toy_case():
    return toy_two_zone_case()


@pytest.fixture(scope="session")
def case_study():
    profiles, network = synthesize_case_study()
    return build_case(profiles, network)


@pytest.fixture(scope="session")
def batch_cfg():
    return ADMMConfig(rho=0.1, max_iter=30_000, primal_tol=1e-7, dual_tol=1e-7)


@pytest.fixture(scope="session")
def batch_results(case_study, batch_cfg, tmp_path_factory):
    from capmkt.runner import run_batch
    out = tmp_path_factory.mktemp("batch")
    results = run_batch(case_study, out, batch_cfg, seed=0)
    for r in results.values():
        r.out_dir = out / r.scenario.design
    return results


@pytest.fixture(scope="session")
def four_node_network():
    """Three-zone, four-node grid: zone A = {n1, n2}, B = {n3}, C = {n4}."""
    return Network(
        nodes=("n1", "n2", "n3", "n4"),
        lines=(
            Line("n1", "n2", 1.0, 500.0),
            Line("n1", "n3", 1.0, 3000.0),
            Line("n2", "n4", 1.0, 3000.0),
            Line("n3", "n4", 1.0, 3000.0),
        ),
        zones=("A", "B", "C"),
        node_zone={"n1": "A", "n2": "A", "n3": "B", "n4": "C"},
        demand_share={"n1": 0.5, "n2": 0.5, "n3": 1.0, "n4": 1.0},
    )


@pytest.fixture(scope="session")
def four_node_ptdf(four_node_network):
    return build_ptdf(four_node_network, slack="n1")


def dc_flow_oracle(network, injections, slack="n1"):
    """Dense susceptance-system solve, independent of the PTDF path."""
    nodes = list(network.nodes)
    idx = {n: i for i, n in enumerate(nodes)}
    n = len(nodes)
    B = np.zeros((n, n))
    for ln in network.lines:
        i, j = idx[ln.from_node], idx[ln.to_node]
        B[i, i] += ln.susceptance
        B[j, j] += ln.susceptance
        B[i, j] -= ln.susceptance
        B[j, i] -= ln.susceptance
    keep = [i for i in range(n) if i != idx[slack]]
    theta = np.zeros(n)
    theta[keep] = np.linalg.solve(B[np.ix_(keep, keep)], np.asarray(injections)[keep])
    flows = []
    for ln in network.lines:
        flows.append(ln.susceptance * (theta[idx[ln.from_node]] - theta[idx[ln.to_node]]))
    return np.array(flows)


def projection_lp_oracle(network, ptdf, net_positions, caps, demand):
    """Brute-force feasibility LP over explicit (ghat, r, f) variables."""
    nn = len(network.nodes)
    nl = len(network.lines)
    nz = len(network.zones)
    nvar = 2 * nn + nl  # ghat, r, f
    A_eq, b_eq = [], []
    for i in range(nn):  # r = ghat - d
        row = np.zeros(nvar)
        row[i] = 1.0
        row[nn + i] = -1.0
        A_eq.append(row)
        b_eq.append(demand[i])
    for k in range(nl):  # f = PTDF r
        row = np.zeros(nvar)
        row[nn: 2 * nn] = -ptdf.entries[k]
        row[2 * nn + k] = 1.0
        A_eq.append(row)
        b_eq.append(0.0)
    M = network.zone_membership_matrix()
    for z in range(nz):  # zonal aggregation
        row = np.zeros(nvar)
        row[nn: 2 * nn] = M[z]
        A_eq.append(row)
        b_eq.append(net_positions[z])
    row = np.zeros(nvar)  # global balance
    row[nn: 2 * nn] = 1.0
    A_eq.append(row)
    b_eq.append(0.0)
    F = network.f_max_vector()
    bounds = [(0.0, float(c)) for c in caps]
    bounds += [(None, None)] * nn
    bounds += [(-float(f), float(f)) for f in F]
    res = linprog(np.zeros(nvar), A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=bounds, method="highs")
    return res.status == 0
