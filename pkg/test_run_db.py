import json

import pytest

from run_db import EpochRecord, Run, RunRegistry, init_db
from trainer import LedgerRow, RunLedger


@pytest.fixture
def session():
    factory = init_db("sqlite://")
    with factory() as session:
        yield session


def test_registry_records_a_run(session):
    registry = RunRegistry(session)
    run_id = registry.start("wn18rr", 3, {"lr": 0.01, "preset": "wn18rr"})

    ledger = RunLedger()
    for row in (LedgerRow(1, 2.5, None, 0.001, 1.0), LedgerRow(2, 2.1, 0.3, 0.002, 1.1)):
        ledger.record(row)
        registry.record_epoch(row)
    registry.finish(ledger)

    run = session.get(Run, run_id)
    assert run.status == "finished"
    assert run.best_mrr == 0.3 and run.best_epoch == 2
    assert json.loads(run.config)["preset"] == "wn18rr"
    assert [record.epoch for record in run.epochs] == [1, 2]
    assert run.epochs[0].dev_mrr is None


def test_failed_run_keeps_its_epochs(session):
    registry = RunRegistry(session)
    registry.start("custom", 0, {})
    registry.record_epoch(LedgerRow(1, 3.0, None, 0.0, 0.5))
    registry.finish(RunLedger(), status="failed")

    run = session.query(Run).one()
    assert run.status == "failed"
    assert run.best_mrr is None
    assert session.query(EpochRecord).count() == 1


if __name__ == "__main__":
    pytest.main([__file__])
