"""Experiment and budget ledger kept in the campaign database between stages."""

import logging
from typing import Optional

from sqlmodel import select

from app.database import get_session
from app.models import BudgetLedger, ExperimentRecord, ExperimentRow, LedgerRow

logger = logging.getLogger(__name__)


def save_experiments(records: list[ExperimentRecord], phase: int, url: Optional[str] = None) -> int:
    """Replace the stored experiments of one phase."""
    with get_session(url) as session:
        for row in session.exec(select(ExperimentRow).where(ExperimentRow.phase == phase)).all():
            session.delete(row)
        session.flush()
        for record in records:
            session.add(
                ExperimentRow(fault_id=record.fault, test=record.test, phase=phase, payload=record.model_dump_json())
            )
        session.commit()
    logger.info(f"Stored {len(records)} phase {phase} experiments")
    return len(records)


def load_experiments(url: Optional[str] = None, phases: Optional[list[int]] = None) -> list[ExperimentRecord]:
    """Stored experiments in insertion order, optionally limited to some phases."""
    with get_session(url) as session:
        statement = select(ExperimentRow).order_by(ExperimentRow.id)  # type: ignore[arg-type]
        if phases is not None:
            statement = statement.where(ExperimentRow.phase.in_(phases))  # type: ignore[attr-defined]
        rows = session.exec(statement).all()
        return [ExperimentRecord.model_validate_json(row.payload) for row in rows]


def update_experiments(records: list[ExperimentRecord], url: Optional[str] = None) -> None:
    """Rewrite the payload of stored experiments, e.g. after the IDF was retrained."""
    by_pair = {(record.fault, record.test): record for record in records}
    with get_session(url) as session:
        for row in session.exec(select(ExperimentRow)).all():
            record = by_pair.get((row.fault_id, row.test))
            if record is not None:
                row.payload = record.model_dump_json()
                session.add(row)
        session.commit()


def save_ledger(ledger: BudgetLedger, phase: int, url: Optional[str] = None) -> None:
    """Store the ledger as it stands after `phase`, replacing any earlier snapshot of that phase."""
    with get_session(url) as session:
        for row in session.exec(select(LedgerRow).where(LedgerRow.phase == phase)).all():
            session.delete(row)
        session.flush()
        session.add(LedgerRow(phase=phase, payload=ledger.model_dump_json()))
        session.commit()


def load_ledger(phase: Optional[int] = None, url: Optional[str] = None) -> Optional[BudgetLedger]:
    """Ledger snapshot of one phase, or the latest one."""
    with get_session(url) as session:
        statement = select(LedgerRow).order_by(LedgerRow.phase.desc())  # type: ignore[attr-defined]
        if phase is not None:
            statement = statement.where(LedgerRow.phase == phase)
        row = session.exec(statement).first()
        if row is None:
            return None
        return BudgetLedger.model_validate_json(row.payload)


def clear_from(phase: int, url: Optional[str] = None) -> None:
    """Forget experiments and ledger snapshots of `phase` and every later phase."""
    with get_session(url) as session:
        for row in session.exec(select(ExperimentRow).where(ExperimentRow.phase >= phase)).all():
            session.delete(row)
        for ledger_row in session.exec(select(LedgerRow).where(LedgerRow.phase >= phase)).all():
            session.delete(ledger_row)
        session.commit()
