#!/usr/bin/env python
import os
import sys
from pathlib import Path


def main():
    # src/ must be importable so that 'app.*' resolves when run as app/manage.py
    sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'app.config.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldnt import Django.."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
