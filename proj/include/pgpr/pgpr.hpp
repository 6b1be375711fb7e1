#ifndef PGPR_PGPR_HPP_
#define PGPR_PGPR_HPP_

#include "pgpr/centralized.hpp"
#include "pgpr/errors.hpp"
#include "pgpr/fullgp.hpp"
#include "pgpr/harness/dataset_io.hpp"
#include "pgpr/harness/experiment.hpp"
#include "pgpr/harness/metrics.hpp"
#include "pgpr/harness/synthetic.hpp"
#include "pgpr/kernel.hpp"
#include "pgpr/linalg.hpp"
#include "pgpr/parallel/engine.hpp"
#include "pgpr/parallel/partition.hpp"
#include "pgpr/parallel/summaries.hpp"
#include "pgpr/parallel/transport.hpp"
#include "pgpr/support.hpp"

#endif
