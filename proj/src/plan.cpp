#include "gridbroker/plan.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>

namespace gridbroker {

namespace {

bool is_name_start(char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '_'; }
bool is_name_char(char c) { return is_name_start(c) || (c >= '0' && c <= '9'); }

bool valid_name(std::string_view s) {
    return !s.empty() && is_name_start(s.front()) && std::all_of(s.begin() + 1, s.end(), is_name_char);
}

struct Token {
    std::string text;
    std::size_t column;  // 1-based
};

struct Line {
    std::size_t number;
    std::string_view raw;  // comment stripped
    std::vector<Token> tokens;
};

std::string_view strip_comment(std::string_view line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

std::vector<Token> tokenize(std::string_view line, std::size_t line_no) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < line.size()) {
        if (line[i] == ' ' || line[i] == '\t' || line[i] == '\r') {
            ++i;
            continue;
        }
        const std::size_t col = i + 1;
        if (line[i] == '"') {
            const auto close = line.find('"', i + 1);
            if (close == std::string_view::npos) {
                throw PlanError(ErrorCode::SyntaxError, line_no, col, "unterminated quoted string");
            }
            out.push_back({std::string(line.substr(i + 1, close - i - 1)), col});
            i = close + 1;
            continue;
        }
        const auto start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
        out.push_back({std::string(line.substr(start, i - start)), col});
    }
    return out;
}

double parse_number(const Token& tok, std::size_t line_no) {
    double v = 0;
    const char* first = tok.text.data();
    const char* last = first + tok.text.size();
    if (!tok.text.empty() && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last || !std::isfinite(v)) {
        throw PlanError(ErrorCode::SyntaxError, line_no, tok.column, "expected a number, got '" + tok.text + "'");
    }
    return v;
}

void expect_keyword(const Line& line, std::size_t index, std::string_view keyword) {
    if (index >= line.tokens.size()) {
        throw PlanError(ErrorCode::SyntaxError, line.number, line.raw.size() + 1,
                        "expected '" + std::string(keyword) + "'");
    }
    if (line.tokens[index].text != keyword) {
        throw PlanError(ErrorCode::SyntaxError, line.number, line.tokens[index].column,
                        "expected '" + std::string(keyword) + "', got '" + line.tokens[index].text + "'");
    }
}

void expect_end(const Line& line, std::size_t index) {
    if (index < line.tokens.size()) {
        throw PlanError(ErrorCode::SyntaxError, line.number, line.tokens[index].column,
                        "unexpected '" + line.tokens[index].text + "'");
    }
}

ParameterDef parse_parameter(const Line& line) {
    const auto& t = line.tokens;
    if (t.size() < 3) {
        throw PlanError(ErrorCode::SyntaxError, line.number, line.raw.size() + 1, "incomplete parameter declaration");
    }
    ParameterDef def;
    def.name = t[1].text;
    if (!valid_name(def.name)) {
        throw PlanError(ErrorCode::SyntaxError, line.number, t[1].column, "invalid parameter name '" + def.name + "'");
    }
    std::size_t k = 2;
    const auto is_domain = [](const std::string& s) { return s == "range" || s == "select" || s == "single"; };
    if (!is_domain(t[k].text)) {
        def.label = t[k].text;
        ++k;
    }
    if (k >= t.size() || !is_domain(t[k].text)) {
        const std::size_t col = k < t.size() ? t[k].column : line.raw.size() + 1;
        throw PlanError(ErrorCode::SyntaxError, line.number, col, "expected 'range', 'select' or 'single'");
    }
    const std::string& kind = t[k].text;
    if (kind == "range") {
        expect_keyword(line, k + 1, "from");
        if (k + 2 >= t.size()) throw PlanError(ErrorCode::SyntaxError, line.number, line.raw.size() + 1, "missing lower bound");
        const double lo = parse_number(t[k + 2], line.number);
        expect_keyword(line, k + 3, "to");
        if (k + 4 >= t.size()) throw PlanError(ErrorCode::SyntaxError, line.number, line.raw.size() + 1, "missing upper bound");
        const double hi = parse_number(t[k + 4], line.number);
        expect_keyword(line, k + 5, "step");
        if (k + 6 >= t.size()) throw PlanError(ErrorCode::SyntaxError, line.number, line.raw.size() + 1, "missing step");
        const double step = parse_number(t[k + 6], line.number);
        expect_end(line, k + 7);
        if (!(step > 0)) throw PlanError(ErrorCode::SyntaxError, line.number, t[k + 6].column, "step must be positive");
        if (lo > hi) throw PlanError(ErrorCode::SyntaxError, line.number, t[k + 2].column, "lower bound exceeds upper bound");
        def.domain = RangeDomain{lo, hi, step};
    } else if (kind == "select") {
        expect_keyword(line, k + 1, "anyof");
        SelectDomain sel;
        for (std::size_t i = k + 2; i < t.size(); ++i) sel.values.push_back(t[i].text);
        if (sel.values.empty()) {
            throw PlanError(ErrorCode::EmptyDomain, line.number, t[k + 1].column, "select needs at least one value");
        }
        def.domain = std::move(sel);
    } else {
        if (k + 1 >= t.size()) throw PlanError(ErrorCode::SyntaxError, line.number, line.raw.size() + 1, "missing value");
        expect_end(line, k + 2);
        def.domain = SingleDomain{t[k + 1].text};
    }
    return def;
}

/// Everything after the leading keyword, trimmed.
std::string rest_of_line(const Line& line) {
    const auto& kw = line.tokens.front();
    std::string_view rest = line.raw.substr(kw.column - 1 + kw.text.size());
    const auto b = rest.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = rest.find_last_not_of(" \t\r");
    return std::string(rest.substr(b, e - b + 1));
}

const std::string* find_binding(const std::vector<std::pair<std::string, std::string>>& binding, std::string_view name) {
    for (const auto& [k, v] : binding) {
        if (k == name) return &v;
    }
    return nullptr;
}

struct Placeholder {
    std::string name;
    std::size_t offset;
};

std::vector<Placeholder> scan_placeholders(std::string_view templ) {
    std::vector<Placeholder> out;
    for (std::size_t i = 0; i < templ.size(); ++i) {
        if (templ[i] != '$' || i + 1 >= templ.size()) continue;
        if (templ[i + 1] == '$') {
            ++i;
            continue;
        }
        if (!is_name_start(templ[i + 1])) continue;
        std::size_t j = i + 1;
        while (j < templ.size() && is_name_char(templ[j])) ++j;
        out.push_back({std::string(templ.substr(i + 1, j - i - 1)), i});
        i = j - 1;
    }
    return out;
}

}  // namespace

PlanError::PlanError(ErrorCode code, std::size_t line, std::size_t column, const std::string& message)
    : Error(code, "line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + message),
      line_(line),
      column_(column) {}

std::size_t ParameterDef::cardinality() const {
    if (const auto* r = std::get_if<RangeDomain>(&domain)) {
        return static_cast<std::size_t>(std::floor((r->hi - r->lo) / r->step + 1e-9)) + 1;
    }
    if (const auto* s = std::get_if<SelectDomain>(&domain)) return s->values.size();
    return 1;
}

std::vector<std::string> ParameterDef::values() const {
    std::vector<std::string> out;
    if (const auto* r = std::get_if<RangeDomain>(&domain)) {
        const auto n = cardinality();
        out.reserve(n);
        for (std::size_t k = 0; k < n; ++k) out.push_back(format_number(r->lo + static_cast<double>(k) * r->step));
    } else if (const auto* s = std::get_if<SelectDomain>(&domain)) {
        out = s->values;
    } else {
        out.push_back(std::get<SingleDomain>(domain).value);
    }
    return out;
}

std::string format_number(double v) {
    if (v == 0) return "0";
    if (std::trunc(v) == v && std::fabs(v) < 1e15) return std::to_string(static_cast<long long>(v));
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

PlanModel parse_plan(std::string_view text) {
    PlanModel plan;
    bool in_task = false;
    bool seen_task = false;
    bool seen_execute = false;
    std::size_t execute_line = 0;
    std::size_t execute_column = 0;
    std::vector<std::pair<std::size_t, std::size_t>> copy_positions;

    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        ++line_no;
        Line line{line_no, strip_comment(text.substr(pos, nl - pos)), {}};
        pos = nl + 1;
        line.tokens = tokenize(line.raw, line_no);
        if (line.tokens.empty()) continue;
        const auto& kw = line.tokens.front();

        if (!in_task) {
            if (kw.text == "parameter") {
                auto def = parse_parameter(line);
                const bool dup = std::any_of(plan.parameters.begin(), plan.parameters.end(),
                                             [&](const ParameterDef& p) { return p.name == def.name; });
                if (dup) {
                    throw PlanError(ErrorCode::DuplicateParameter, line_no, line.tokens[1].column,
                                    "parameter '" + def.name + "' already declared");
                }
                plan.parameters.push_back(std::move(def));
            } else if (kw.text == "task") {
                if (seen_task) throw PlanError(ErrorCode::SyntaxError, line_no, kw.column, "only one task is supported");
                if (line.tokens.size() != 2) {
                    throw PlanError(ErrorCode::SyntaxError, line_no, kw.column, "expected 'task <name>'");
                }
                plan.task.name = line.tokens[1].text;
                in_task = true;
                seen_task = true;
            } else {
                throw PlanError(ErrorCode::SyntaxError, line_no, kw.column, "unexpected '" + kw.text + "'");
            }
            continue;
        }

        if (kw.text == "endtask") {
            expect_end(line, 1);
            in_task = false;
        } else if (kw.text == "execute") {
            if (seen_execute) throw PlanError(ErrorCode::SyntaxError, line_no, kw.column, "task has more than one execute");
            plan.task.execute = rest_of_line(line);
            if (plan.task.execute.empty()) throw PlanError(ErrorCode::SyntaxError, line_no, kw.column, "empty execute");
            seen_execute = true;
            execute_line = line_no;
            execute_column = line.raw.find(plan.task.execute, kw.column - 1 + kw.text.size()) + 1;
        } else if (kw.text == "copy") {
            if (line.tokens.size() != 3) {
                throw PlanError(ErrorCode::SyntaxError, line_no, kw.column, "expected 'copy <source> <destination>'");
            }
            plan.task.staging.push_back({line.tokens[1].text, line.tokens[2].text});
            copy_positions.emplace_back(line_no, line.tokens[1].column);
        } else {
            throw PlanError(ErrorCode::SyntaxError, line_no, kw.column, "unexpected '" + kw.text + "' inside task");
        }
    }

    if (in_task) throw PlanError(ErrorCode::SyntaxError, line_no, 1, "missing endtask");
    if (!seen_task) throw PlanError(ErrorCode::SyntaxError, line_no, 1, "plan has no task");
    if (!seen_execute) throw PlanError(ErrorCode::SyntaxError, line_no, 1, "task has no execute");

    const auto check = [&](std::string_view templ, std::size_t ln, std::size_t col) {
        for (const auto& ph : scan_placeholders(templ)) {
            const bool declared = std::any_of(plan.parameters.begin(), plan.parameters.end(),
                                              [&](const ParameterDef& p) { return p.name == ph.name; });
            if (!declared) {
                throw PlanError(ErrorCode::UndeclaredParameter, ln, col + ph.offset,
                                "undeclared parameter '" + ph.name + "'");
            }
        }
    };
    check(plan.task.execute, execute_line, execute_column);
    for (std::size_t i = 0; i < plan.task.staging.size(); ++i) {
        check(plan.task.staging[i].source, copy_positions[i].first, copy_positions[i].second);
        check(plan.task.staging[i].destination, copy_positions[i].first, copy_positions[i].second);
    }
    return plan;
}

std::vector<JobSpec> expand_jobs(const PlanModel& plan) {
    std::vector<std::vector<std::string>> domains;
    domains.reserve(plan.parameters.size());
    std::size_t total = 1;
    for (const auto& p : plan.parameters) {
        domains.push_back(p.values());
        if (domains.back().empty()) throw Error(ErrorCode::EmptyDomain, "parameter '" + p.name + "' has no values");
        total *= domains.back().size();
    }

    std::vector<JobSpec> jobs;
    jobs.reserve(total);
    std::vector<std::size_t> index(domains.size(), 0);
    for (std::size_t n = 0; n < total; ++n) {
        JobSpec spec;
        spec.binding.reserve(domains.size());
        for (std::size_t p = 0; p < domains.size(); ++p) {
            spec.binding.emplace_back(plan.parameters[p].name, domains[p][index[p]]);
        }
        spec.command = substitute(plan.task.execute, spec.binding);
        jobs.push_back(std::move(spec));
        for (std::size_t p = domains.size(); p-- > 0;) {
            if (++index[p] < domains[p].size()) break;
            index[p] = 0;
        }
    }
    return jobs;
}

std::string substitute(std::string_view templ, const std::vector<std::pair<std::string, std::string>>& binding) {
    std::string out;
    out.reserve(templ.size());
    for (std::size_t i = 0; i < templ.size(); ++i) {
        const char c = templ[i];
        if (c != '$' || i + 1 >= templ.size()) {
            out.push_back(c);
            continue;
        }
        if (templ[i + 1] == '$') {
            out.push_back('$');
            ++i;
            continue;
        }
        if (!is_name_start(templ[i + 1])) {
            out.push_back(c);
            continue;
        }
        std::size_t j = i + 1;
        while (j < templ.size() && is_name_char(templ[j])) ++j;
        const auto name = templ.substr(i + 1, j - i - 1);
        const auto* value = find_binding(binding, name);
        if (value == nullptr) throw Error(ErrorCode::MissingBinding, "no value for '" + std::string(name) + "'");
        out += *value;
        i = j - 1;
    }
    return out;
}

std::vector<std::string> placeholders(std::string_view templ) {
    std::vector<std::string> names;
    for (auto& ph : scan_placeholders(templ)) {
        if (std::find(names.begin(), names.end(), ph.name) == names.end()) names.push_back(std::move(ph.name));
    }
    return names;
}

}  // namespace gridbroker
