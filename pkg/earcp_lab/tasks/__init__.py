# Celery tasks running experiment cells
