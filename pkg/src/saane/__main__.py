# -*- coding: utf-8 -*-

"""Entrypoint module, in case you use `python -m saane`."""

from .cli import main

if __name__ == "__main__":
    main()
