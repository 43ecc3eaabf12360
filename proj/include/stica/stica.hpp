#ifndef STICA_STICA_HPP
#define STICA_STICA_HPP

// Everything at once.

#include "errors.hpp"
#include "sparsela.hpp"
#include "mesh.hpp"
#include "io.hpp"
#include "template.hpp"
#include "preprocess.hpp"
#include "em.hpp"
#include "inference.hpp"
#include "eval.hpp"
#include "pipeline.hpp"

#endif
