import re

import numpy as np
import pytest

from hocbf import scenario
from hocbf.certifier import VerificationProblem, verify_multi
from hocbf.synthesizer import SynthesisOptions, synth_all
from hocbf.system import ModelError, build_chain, zeta_bar

DI = scenario.load("double_integrator")
_CACHE = {}


def two_walls():
    """Double integrator kept inside 0 <= x1 <= 1.8, synthesized in order."""
    if "two" not in _CACHE:
        raw = scenario.double_integrator()
        raw["candidates"].append({"name": "far", "b": "1.8 - x1", "r": 2})
        sc = scenario.from_dict(raw)
        _CACHE["two"] = (sc, synth_all(sc.candidates, sc.system, sc.X, sc.U, sc.clifs, sc.synthesis_options()))
    return _CACHE["two"]


def test_synthesis_succeeds_and_is_gated():
    sc, res = two_walls()
    assert res.ok, res.failure
    assert res.sdp_count == 4 and res.class_k_count() == 4
    assert res.joint.verified
    for st in res.stages:
        assert st.certified
        assert st.max_residual <= 1e-6 and st.min_eig >= -1e-7


def test_coefficients_nonnegative_and_nonzero():
    _, res = two_walls()
    for ch in res.chains:
        for tmpl in list(ch.betas) + [ch.alpha_r]:
            c = np.array(tmpl.coeffs)
            assert np.all(c >= 0) and c.max() >= 1e-9


def test_sqrt_and_eta_forms_are_consistent():
    _, res = two_walls()
    for ch in res.chains:
        for beta, zbar, sq, eta in zip(ch.betas, ch.zeta_bars, ch.sqrt_forms, ch.etas):
            z = np.linspace(0, zbar, 1000)
            assert np.all(sq(z) >= eta * z * (1 - 1e-12))
            assert np.all(eta * z <= np.sqrt(2 * beta(z)) * (1 + 1e-12))


def test_eta_chain_verifies_jointly():
    sc, res = two_walls()
    cands = [ch.candidate for ch in res.chains]
    rep = verify_multi(VerificationProblem(sc.system, sc.X, sc.U, cands, list(sc.clifs)))
    assert rep.verified and np.isfinite(rep.rho_sum)


def test_generator_sets_only_look_back():
    sc, res = two_walls()
    names = [c.name for c in sc.candidates]
    for j, gens in enumerate(res.generator_sets):
        for stage_gens in gens.values():
            for g in stage_gens:
                m = re.match(r"psi\d+\[(.+)\]", g)
                if m:
                    assert names.index(m.group(1)) <= j


def test_zeta_bar_covers_companion_values():
    sc, res = two_walls()
    ch = res.chains[0]
    psi0 = build_chain(ch.candidate, sc.system).psis[0]
    assert ch.zeta_bars[0] >= zeta_bar(psi0, sc.X, factor=1.0)


def test_drift_mode_reports_zero_template():
    # without the input, x2 + c x1 >= 0 cannot hold on X for any c > 0
    opts = DI.synthesis_options(stage_a_input="drift")
    res = synth_all(DI.candidates, DI.system, DI.X, DI.U, DI.clifs, opts)
    assert not res.ok
    assert res.failed_candidate == "wall" and res.failed_stage == "a2"
    assert "zero template" in res.failure


def test_option_validation():
    with pytest.raises(ModelError):
        SynthesisOptions(stage_a_input="both")
    with pytest.raises(ModelError):
        SynthesisOptions(gate="sometimes")
    assert SynthesisOptions(gate=True).gate == "joint"


def test_gate_each_matches_joint():
    sc, res = two_walls()
    each = synth_all(sc.candidates, sc.system, sc.X, sc.U, sc.clifs, sc.synthesis_options(gate="each"))
    assert each.ok and all(ch.gate.verified for ch in each.chains)
    assert [ch.alpha_r.coeffs for ch in each.chains] == [ch.alpha_r.coeffs for ch in res.chains]
