#pragma once

#include "dqrelo/compressor.hpp"
#include "dqrelo/container.hpp"
#include "dqrelo/delta_stats.hpp"
#include "dqrelo/errors.hpp"
#include "dqrelo/float_codec.hpp"
#include "dqrelo/linalg.hpp"
#include "dqrelo/pipeline.hpp"
#include "dqrelo/reconstruct.hpp"
#include "dqrelo/sign_pack.hpp"
#include "dqrelo/tensor_archive.hpp"
#include "dqrelo/types.hpp"
#include "dqrelo/version.hpp"
