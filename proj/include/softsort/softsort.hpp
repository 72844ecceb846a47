#pragma once

#include <softsort/core.hpp>
#include <softsort/measures.hpp>
#include <softsort/exact1d.hpp>
#include <softsort/sinkhorn.hpp>
#include <softsort/differentiation.hpp>
#include <softsort/losses.hpp>
#include <softsort/least_quantile.hpp>
#include <softsort/io.hpp>
#include <softsort/array_api.hpp>
