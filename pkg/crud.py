from typing import List, Optional

from sqlalchemy import delete
from sqlmodel import Session, select

from schema import RunRecord, RunRecordCreate


class RunRecordCRUD:
    def create(self, db: Session, record_data: RunRecordCreate) -> RunRecord:
        record = RunRecord(**record_data.model_dump())
        db.add(record)
        db.commit()
        db.refresh(record)
        return record

    def get_multi(self, db: Session, method: Optional[str] = None) -> List[RunRecord]:
        statement = select(RunRecord)
        if method is not None:
            statement = statement.where(RunRecord.method == method)
        return list(db.exec(statement.order_by(RunRecord.id)).all())

    def get_by_config(self, db: Session, config_hash: str) -> List[RunRecord]:
        statement = (
            select(RunRecord)
            .where(RunRecord.config_hash == config_hash)
            .order_by(RunRecord.experiment, RunRecord.seed)
        )
        return list(db.exec(statement).all())

    def delete_by_config(self, db: Session, config_hash: str) -> None:
        db.execute(delete(RunRecord).where(RunRecord.config_hash == config_hash))
        db.commit()


crud_run_records = RunRecordCRUD()
