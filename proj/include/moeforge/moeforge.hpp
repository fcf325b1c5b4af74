#pragma once

#include "moeforge/dense_ffn.hpp"
#include "moeforge/error.hpp"
#include "moeforge/expert.hpp"
#include "moeforge/importance.hpp"
#include "moeforge/io.hpp"
#include "moeforge/moe_layer.hpp"
#include "moeforge/partitioner.hpp"
#include "moeforge/rng.hpp"
#include "moeforge/routing_analysis.hpp"
#include "moeforge/sampler.hpp"
#include "moeforge/tensor.hpp"
#include "moeforge/trainer.hpp"
