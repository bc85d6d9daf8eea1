#!/usr/bin/env python3
"""
Celery worker startup script for distributed experiment cells

Set CELERY_TASK_ALWAYS_EAGER=false for both the worker and the CLI so that cells
are dispatched to the broker instead of running in-process.
"""

import os
import sys

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from earcp_lab.celery_app import celery_app
from earcp_lab.core.config import settings

if __name__ == "__main__":
    celery_app.worker_main([
        "worker",
        f"--loglevel={settings.LOG_LEVEL.lower()}",
        "--concurrency=2",
        f"--queues={settings.CELERY_QUEUE}",
        "--hostname=earcp_lab_worker@%h"
    ])
