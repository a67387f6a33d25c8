import pytest

from common.errors import ConfigError
from common.jobs import Job, JobFactory
from common.runtime import JobDispatcher


class RecordJob(Job):
    def execute(self, *, context):
        context.setdefault("seen", []).append(self.name)
        return {"name": self.name, "value": self.config.get("value")}


def _factory():
    factory = JobFactory()
    factory.register("record", RecordJob)
    return factory


def test_factory_creates_registered_jobs():
    factory = _factory()
    job = factory.create({"type": "record", "name": "a"})
    assert isinstance(job, RecordJob)
    assert job.name == "a"
    assert factory.create({"type": "record"}).name == "record"
    assert factory.job_types == ["record"]


def test_factory_reports_pointer_for_bad_type():
    with pytest.raises(ConfigError) as exc:
        _factory().create({"name": "x"}, pointer="/jobs/2")
    assert exc.value.pointer == "/jobs/2/type"


def test_dispatcher_runs_jobs_in_order_with_shared_context():
    context = {}
    results = JobDispatcher(_factory()).dispatch_jobs(
        [{"type": "record", "name": "a", "value": 1}, {"type": "record", "name": "b", "value": 2}], context=context
    )
    assert [r["value"] for r in results] == [1, 2]
    assert context["seen"] == ["a", "b"]


def test_dispatcher_points_at_failing_job():
    with pytest.raises(ConfigError) as exc:
        JobDispatcher(_factory()).dispatch_jobs([{"type": "record"}, {"type": "sweep"}])
    assert exc.value.pointer == "/jobs/1/type"
