import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import inspect

from database import engine
from main import app
from app.services.gkls_engine import GKLSSpec, GKSBasis
from app.services.operator_core import projector, zeros

AMPLITUDE_DAMPING = {
    "kind": "extract",
    "name": "api_amplitude_damping",
    "gamma": 1.0,
    "model": {"type": "single"},
}


@pytest.fixture()
def client():
    with TestClient(app) as c:
        yield c


def _decay_spec() -> GKLSSpec:
    basis = GKSBasis.local((2,))
    gamma = np.zeros((3, 3), dtype=complex)
    gamma[basis.index(0, "sm"), basis.index(0, "sm")] = 1.0
    return GKLSSpec(basis, zeros((2,)), gamma)


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["message"] == "Collider API"


def test_validate_lists_errors(client):
    response = client.post("/experiments/validate", json={"kind": "extract", "gamma": -2})
    assert response.status_code == 422
    errors = response.json()["detail"]["errors"]
    assert any(e.startswith("gamma") for e in errors)


def test_validate_returns_hash(client):
    response = client.post("/experiments/validate", json=AMPLITUDE_DAMPING)
    assert response.status_code == 200
    body = response.json()
    assert body["valid"] is True
    assert len(body["config_hash"]) == 64


def test_run_is_recorded_in_ledger(client):
    response = client.post("/experiments/run", json={"config": AMPLITUDE_DAMPING, "write": False})
    assert response.status_code == 200
    body = response.json()
    assert body["passed"] is True
    assert body["output_dir"] is None
    run_id = body["run_id"]
    assert run_id is not None

    detail = client.get(f"/experiments/runs/{run_id}")
    assert detail.status_code == 200
    assert detail.json()["summary"]["name"] == "api_amplitude_damping"

    listed = client.get("/experiments/runs", params={"kind": "extract", "passed": True})
    assert run_id in [row["id"] for row in listed.json()]


def test_missing_run_is_404(client):
    assert client.get("/experiments/runs/987654321").status_code == 404


def test_export_endpoint(client):
    response = client.post(
        "/experiments/export", json={"config": {"kind": "appendixA", "name": "pair"}, "dt": 0.0625}
    )
    assert response.status_code == 200
    stages = response.json()["stages"]
    assert [s["kind"] for s in stages] == ["collision"] * 3


def test_export_endpoint_rejects_large_timestep(client):
    response = client.post("/experiments/export", json={"config": AMPLITUDE_DAMPING, "dt": 4.0})
    assert response.status_code == 422


def test_liouvillian_endpoint(client):
    response = client.post("/gkls/liouvillian", json=_decay_spec().to_payload().model_dump())
    assert response.status_code == 200
    body = response.json()
    assert body["dims"] == [2]
    assert body["trace_annihilation_defect"] < 1e-12
    assert len(body["matrix"]["re"]) == 4


def test_decompose_endpoint_round_trip(client):
    spec = _decay_spec()
    generator = client.post("/gkls/liouvillian", json=spec.to_payload().model_dump()).json()
    response = client.post(
        "/gkls/decompose", json={"dims": [2], "matrix": generator["matrix"], "basis": [[0, "sm"]]}
    )
    assert response.status_code == 200
    body = response.json()
    assert body["residual"] < 1e-10
    assert body["spec"]["kossakowski"]["re"][0][0] == pytest.approx(1.0)


def test_decompose_rejects_non_generator(client):
    response = client.post(
        "/gkls/decompose", json={"dims": [2], "matrix": {"re": np.eye(4).tolist(), "im": np.zeros((4, 4)).tolist()}}
    )
    assert response.status_code == 400


def test_propagate_endpoint(client):
    request = {
        "spec": _decay_spec().to_payload().model_dump(),
        "rho0": projector(2, 1).to_payload().model_dump(),
        "times": [0.0, 1.0],
    }
    response = client.post("/gkls/propagate", json=request)
    assert response.status_code == 200
    states = response.json()["states"]
    assert states[0]["re"][1][1] == pytest.approx(1.0)
    assert states[1]["re"][1][1] == pytest.approx(np.exp(-1.0))


def test_startup_creates_run_ledger(client):
    assert inspect(engine).has_table("experiment_runs")
