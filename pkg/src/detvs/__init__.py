# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Distance Estimation Transformer visual servoing toolkit."""

__version__ = "0.1.0"
