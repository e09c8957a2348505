#pragma once

#include "collab/cli.hpp"
#include "collab/common.hpp"
#include "collab/config.hpp"
#include "collab/environment.hpp"
#include "collab/harness.hpp"
#include "collab/ingest.hpp"
#include "collab/model.hpp"
#include "collab/params.hpp"
#include "collab/partition.hpp"
#include "collab/recommender.hpp"
#include "collab/rng.hpp"
