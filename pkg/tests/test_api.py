"""Tests for the inspection API."""
from datetime import datetime, timezone

from vpgo import __version__, crud
from vpgo.schemas import MetricReport, ProtocolConfig, RunManifest, ScoreSummary, Stat


def _manifest(command="eval") -> RunManifest:
    return RunManifest(command=command, argv=[command], seed=0, version=__version__,
                       torch_version="2.3.0", created_at=datetime(2024, 1, 1, tzinfo=timezone.utc))


GRASP = {"grasp_point": [0.3, 0.1, 0.02], "drop_point": [-0.2, 0.15, 0.02], "top_height": 0.25}


class TestHealth:
    def test_health(self, client):
        """Health endpoint reports the package version."""
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"status": "ok", "version": __version__}


class TestDecompose:
    """POST /actions/decompose."""

    def test_decompose(self, client):
        """Five elements and a net displacement from above the grasp point to above the drop point."""
        response = client.post("/actions/decompose", json={"grasp": GRASP, "max_step": 0.05})
        assert response.status_code == 200
        data = response.json()
        assert [e["kind"] for e in data["elements"]] == [
            "ApproachTop", "DescendAndClose", "Lift", "Transport", "OpenAndDrop"]
        assert data["movements"][0]["kind"] == "ApproachTop"
        dx, dy, dz = data["net_displacement"]
        assert abs(dx - (-0.5)) < 1e-9
        assert abs(dy - 0.05) < 1e-9
        assert abs(dz) < 1e-9

    def test_invalid_grasp(self, client):
        """A hover plane below the grasp point is a validation error."""
        bad = dict(GRASP, top_height=0.0)
        response = client.post("/actions/decompose", json={"grasp": bad})
        assert response.status_code == 422

    def test_invalid_start(self, client):
        """A start below the hover plane is rejected with 400."""
        response = client.post("/actions/decompose", json={"grasp": GRASP, "start": [0.0, 0.0, 0.0]})
        assert response.status_code == 400

    def test_non_positive_step(self, client):
        response = client.post("/actions/decompose", json={"grasp": GRASP, "max_step": 0})
        assert response.status_code == 422


class TestRuns:
    """Read-only registry routes."""

    def test_list_empty(self, client):
        response = client.get("/runs/")
        assert response.status_code == 200
        assert response.json() == []

    def test_list_and_read(self, client, test_db):
        """Runs are listed newest first and readable by id."""
        first = crud.create_run(test_db, _manifest("train"))
        second = crud.create_run(test_db, _manifest("eval"))
        listed = client.get("/runs/").json()
        assert [r["id"] for r in listed] == [second.id, first.id]

        response = client.get(f"/runs/{first.id}")
        assert response.status_code == 200
        assert response.json()["command"] == "train"
        assert response.json()["status"] == "running"

    def test_filter_by_command(self, client, test_db):
        crud.create_run(test_db, _manifest("train"))
        crud.create_run(test_db, _manifest("eval"))
        listed = client.get("/runs/", params={"command": "train"}).json()
        assert [r["command"] for r in listed] == ["train"]

    def test_manifest(self, client, test_db):
        run = crud.create_run(test_db, _manifest("predict"))
        response = client.get(f"/runs/{run.id}/manifest")
        assert response.status_code == 200
        assert response.json()["command"] == "predict"

    def test_reports(self, client, test_db):
        run = crud.create_run(test_db, _manifest())
        summary = ScoreSummary(best=Stat(mean=1.0), average=Stat(mean=0.5))
        report = MetricReport(protocol=ProtocolConfig(), n_examples=1,
                              metrics={"psnr": summary, "ssim": summary,
                                       "lpips": ScoreSummary(best=Stat(mean=0.1), average=Stat(mean=0.2))},
                              fvd=Stat(mean=10.0))
        crud.add_metric_report(test_db, run.id, report, checkpoint="final.pt")
        response = client.get(f"/runs/{run.id}/reports")
        assert response.status_code == 200
        data = response.json()
        assert len(data) == 1
        assert data[0]["checkpoint"] == "final.pt"
        assert data[0]["fvd"] == 10.0

    def test_missing_run_404(self, client):
        """Every per-run route answers 404 for unknown ids."""
        for path in ("/runs/999", "/runs/999/manifest", "/runs/999/reports"):
            response = client.get(path)
            assert response.status_code == 404
            assert response.json()["detail"] == "Run not found"
