from celery import Celery
from earcp_lab.core.config import settings

# Create Celery app
celery_app = Celery(
    "earcp_lab",
    broker=settings.CELERY_BROKER_URL,
    backend=settings.CELERY_RESULT_BACKEND,
    include=["earcp_lab.tasks.experiment_tasks"]
)

# Configure Celery
celery_app.conf.update(
    task_serializer="json",
    accept_content=["json"],
    result_serializer="json",
    timezone="UTC",
    enable_utc=True,
    task_track_started=True,
    task_always_eager=settings.CELERY_TASK_ALWAYS_EAGER,  # cells run in-process unless a broker is configured
    task_eager_propagates=True,
    worker_prefetch_multiplier=1,
    worker_max_tasks_per_child=1000,
)

celery_app.conf.task_routes = {
    "earcp_lab.tasks.experiment_tasks.*": {"queue": settings.CELERY_QUEUE},
}
