// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "malcve/config.hpp"
#include "malcve/cve_kb.hpp"
#include "malcve/decompile.hpp"
#include "malcve/deobfuscator.hpp"
#include "malcve/embeddings.hpp"
#include "malcve/embeddings_remote.hpp"
#include "malcve/errors.hpp"
#include "malcve/eval.hpp"
#include "malcve/hnsw_index.hpp"
#include "malcve/index_io.hpp"
#include "malcve/llm/backend.hpp"
#include "malcve/llm/client.hpp"
#include "malcve/llm/cost.hpp"
#include "malcve/llm/prompts.hpp"
#include "malcve/llm/rate_budget.hpp"
#include "malcve/nvd_client.hpp"
#include "malcve/pipeline/analysis.hpp"
#include "malcve/pipeline/batch.hpp"
#include "malcve/pipeline/download.hpp"
#include "malcve/pipeline/work.hpp"
#include "malcve/rerank.hpp"
#include "malcve/vector_index.hpp"
