import logging

from earcp_lab.celery_app import celery_app
from earcp_lab.models.schemas import CellJob
from earcp_lab.services.experiment_service import run_cell

logger = logging.getLogger(__name__)

@celery_app.task(bind=True, name="earcp_lab.tasks.experiment_tasks.run_cell")
def run_cell_task(self, payload: dict) -> dict:
    """Celery task running one (aggregator x cell x seed) experiment cell"""
    job = CellJob.model_validate(payload)
    try:
        logger.debug(f"Starting cell: aggregator #{job.aggregator_index}, cell {job.cell}, seed {job.seed}")
        result = run_cell(job)
        logger.info(f"Cell finished: {result.aggregator} cell {result.cell} seed {result.seed} "
                    f"(regret {result.regret:.6g})")
        return result.model_dump(mode="json")

    except Exception as e:
        logger.error(f"Error in experiment cell {job.aggregator_index}/{job.cell}/seed {job.seed}: {e}")
        raise
