import copy
import json

import numpy as np
import pytest

from hocbf import certificate as certfile
from hocbf import scenario
from hocbf.synthesizer import synth_all

DI = scenario.load("double_integrator")
_CACHE = {}


def di_cert():
    if "cert" not in _CACHE:
        opts = DI.synthesis_options()
        res = synth_all(DI.candidates, DI.system, DI.X, DI.U, DI.clifs, opts)
        assert res.ok
        _CACHE["cert"] = (res, json.loads(json.dumps(certfile.to_json(res, DI, opts))))
    return _CACHE["cert"]


def test_check_accepts_fresh_certificate():
    res, cert = di_cert()
    rep = certfile.check_certificate(cert, DI)
    assert rep.ok, rep.problems
    # same verdict as the producing run
    assert rep.ok == res.joint.verified
    assert len(rep.checks) == sum(len(st.program.memberships) for st in res.stages)


def test_save_load_round_trip(tmp_path):
    _, cert = di_cert()
    path = tmp_path / "c.json"
    certfile.save(cert, path)
    assert certfile.load(path) == cert
    assert path.read_bytes() == (certfile.save(cert, tmp_path / "d.json") or (tmp_path / "d.json").read_bytes())


def test_runtime_chains_rebuild_slots():
    res, cert = di_cert()
    chains = certfile.runtime_chains(cert, DI)
    x = np.array([0.7, -0.1])
    got = chains[0].evaluate(x)
    from hocbf.system import RuntimeChain
    want = RuntimeChain(res.chains[0].candidate, DI.system).evaluate(x)
    assert got[0] == want[0] and got[1] == want[1] and np.array_equal(got[2], want[2])


def test_corrupted_gram_is_rejected():
    _, cert = di_cert()
    bad = copy.deepcopy(cert)
    mu = bad["candidates"][0]["stages"][1]["memberships"][0]["multipliers"][0]
    mu["gram"][0] += 1.0
    rep = certfile.check_certificate(bad, DI)
    assert not rep.ok
    assert any("residual" in p for p in rep.problems)


def test_corrupted_gain_fails_audit():
    _, cert = di_cert()
    bad = copy.deepcopy(cert)
    bad["candidates"][0]["slots"][0]["poly"] = [50.0]
    bad["candidates"][0]["slots"][0]["mode"] = "poly"
    rep = certfile.check_certificate(bad, DI)
    assert not rep.ok
    assert any("audit" in p for p in rep.problems)


def test_wrong_format_rejected(tmp_path):
    p = tmp_path / "x.json"
    p.write_text(json.dumps({"format": "other", "version": 1}))
    with pytest.raises(certfile.CertificateError):
        certfile.load(p)


def test_poly_json_round_trip():
    p = DI.poly("3*x1^2 - x1*x2 + 0.125", "test")
    assert certfile.poly_from_json(DI.space, certfile.poly_to_json(p)) == p
