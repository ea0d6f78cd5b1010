# -*- coding: utf-8 -*-
"""Setup shim; the metadata lives in setup.cfg."""
import setuptools
setuptools.setup()
