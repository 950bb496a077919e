# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Pytest configuration for DetVS unit tests."""

import os

from hypothesis import settings

# Property tests run fewer examples unless explicitly asked otherwise,
# e.g. HYPOTHESIS_PROFILE=thorough.
settings.register_profile("default", max_examples=50, deadline=None)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
