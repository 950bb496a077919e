# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0
