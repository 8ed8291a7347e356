#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "gridbroker/types.hpp"

namespace gridbroker {

struct RangeDomain {
    double lo = 0;
    double hi = 0;
    double step = 1;
};

struct SelectDomain {
    std::vector<std::string> values;
};

struct SingleDomain {
    std::string value;
};

using ParameterDomain = std::variant<RangeDomain, SelectDomain, SingleDomain>;

struct ParameterDef {
    std::string name;
    std::string label;  // optional free-form type/label token
    ParameterDomain domain;

    std::size_t cardinality() const;
    /// Canonical text of every value in declaration order.
    std::vector<std::string> values() const;
};

/// `copy <src> <dst>` inside a task. Recorded but not executed by the
/// simulated fabric.
struct StagingDirective {
    std::string source;
    std::string destination;
};

struct TaskDef {
    std::string name = "main";
    std::vector<StagingDirective> staging;
    std::string execute;
};

struct PlanModel {
    std::vector<ParameterDef> parameters;
    TaskDef task;
};

/// A plan diagnostic; line and column are 1-based.
class PlanError : public Error {
public:
    PlanError(ErrorCode code, std::size_t line, std::size_t column, const std::string& message);

    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }

private:
    std::size_t line_;
    std::size_t column_;
};

struct JobSpec {
    std::vector<std::pair<std::string, std::string>> binding;
    std::string command;
};

/// Canonical text for a numeric parameter value: integers without a
/// fractional part, everything else in shortest round-trip form.
std::string format_number(double v);

PlanModel parse_plan(std::string_view text);

/// Cartesian product of all parameter domains; the first declared
/// parameter varies slowest.
std::vector<JobSpec> expand_jobs(const PlanModel& plan);

/// Replace every `$name` with its bound value; `$$` is a literal `$`.
/// Throws MissingBinding.
std::string substitute(std::string_view templ, const std::vector<std::pair<std::string, std::string>>& binding);

/// Names referenced by `$name` placeholders, in order of first appearance.
std::vector<std::string> placeholders(std::string_view templ);

}  // namespace gridbroker
