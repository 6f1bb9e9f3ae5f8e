#pragma once

#include "vptd/analysis.hpp"
#include "vptd/cluster.hpp"
#include "vptd/corpus.hpp"
#include "vptd/error.hpp"
#include "vptd/gnn.hpp"
#include "vptd/graph.hpp"
#include "vptd/presets.hpp"
#include "vptd/vtd.hpp"
