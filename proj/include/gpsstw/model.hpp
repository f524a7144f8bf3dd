#pragma once

#include "types.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <variant>
#include <vector>

namespace gpsstw
{
    // Block operands. Times are integer ticks.
    struct Generate
    {
        SimTime mean = 0;
        SimTime half_range = 0;
        std::optional<SimTime> offset;
        std::optional<std::uint64_t> limit;
        std::int32_t priority = 0;

        friend bool operator==(const Generate &, const Generate &) = default;
    };

    struct Advance
    {
        SimTime mean = 0;
        SimTime half_range = 0;

        friend bool operator==(const Advance &, const Advance &) = default;
    };

    struct Transfer
    {
        double probability = 1.0;
        std::string target;

        friend bool operator==(const Transfer &, const Transfer &) = default;
    };

    struct Terminate
    {
        std::uint64_t decrement = 0;

        friend bool operator==(const Terminate &, const Terminate &) = default;
    };

    using BlockOp = std::variant<Generate, Advance, Transfer, Terminate>;

    struct Block
    {
        std::optional<std::string> label;
        BlockOp op;
        std::size_t line = 0; // source line, 0 when built in code

        friend bool operator==(const Block &a, const Block &b) { return a.label == b.label && a.op == b.op; }
    };

    struct ModelPartition
    {
        std::string name;
        std::int64_t termination_start = 1;
        std::vector<Block> blocks;

        friend bool operator==(const ModelPartition &, const ModelPartition &) = default;
    };

    struct ModelProgram
    {
        std::vector<ModelPartition> partitions;
        std::map<std::string, Location> labels;

        const Block &block_at(Location loc) const { return partitions.at(loc.partition).blocks.at(loc.block); }

        Location resolve(const std::string &label) const
        {
            auto it = labels.find(label);
            if (it == labels.end())
            {
                throw SimulationError("unresolved label '" + label + "'");
            }
            return it->second;
        }

        std::size_t block_count() const
        {
            std::size_t n = 0;
            for (const auto &p : partitions)
            {
                n += p.blocks.size();
            }
            return n;
        }

        friend bool operator==(const ModelProgram &, const ModelProgram &) = default;
    };

    class ParseError : public std::runtime_error
    {
    public:
        ParseError(std::size_t line, const std::string &what)
            : std::runtime_error("line " + std::to_string(line) + ": " + what), m_line(line), m_message(what)
        {
        }

        std::size_t line() const noexcept { return m_line; }
        const std::string &message() const noexcept { return m_message; }

    private:
        std::size_t m_line;
        std::string m_message;
    };

    inline const char *block_keyword(const BlockOp &op)
    {
        struct V
        {
            const char *operator()(const Generate &) const { return "GENERATE"; }
            const char *operator()(const Advance &) const { return "ADVANCE"; }
            const char *operator()(const Transfer &) const { return "TRANSFER"; }
            const char *operator()(const Terminate &) const { return "TERMINATE"; }
        };
        return std::visit(V{}, op);
    }

    namespace detail
    {
        inline std::string_view trim(std::string_view s)
        {
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
            {
                s.remove_prefix(1);
            }
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
            {
                s.remove_suffix(1);
            }
            return s;
        }

        inline std::string upper(std::string_view s)
        {
            std::string out(s);
            std::transform(out.begin(), out.end(), out.begin(),
                           [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
            return out;
        }

        inline bool is_identifier(std::string_view s)
        {
            if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_'))
            {
                return false;
            }
            return std::all_of(s.begin(), s.end(),
                               [](unsigned char c) { return std::isalnum(c) || c == '_'; });
        }

        inline bool is_keyword(std::string_view s)
        {
            const auto u = upper(s);
            return u == "PARTITION" || u == "GENERATE" || u == "ADVANCE" || u == "TRANSFER" || u == "TERMINATE";
        }

        inline std::vector<std::string_view> split_operands(std::string_view s)
        {
            std::vector<std::string_view> out;
            if (trim(s).empty())
            {
                return out;
            }
            std::size_t start = 0;
            while (true)
            {
                const auto comma = s.find(',', start);
                out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
                if (comma == std::string_view::npos)
                {
                    break;
                }
                start = comma + 1;
            }
            return out;
        }

        inline std::uint64_t parse_unsigned(std::string_view tok, std::size_t line, const char *what)
        {
            std::uint64_t v = 0;
            const auto *end = tok.data() + tok.size();
            auto [ptr, ec] = std::from_chars(tok.data(), end, v);
            if (tok.empty() || ec != std::errc{} || ptr != end)
            {
                throw ParseError(line, std::string("malformed operand list: ") + what + " must be a non-negative integer, got '" +
                                           std::string(tok) + "'");
            }
            return v;
        }

        inline std::int32_t parse_signed32(std::string_view tok, std::size_t line, const char *what)
        {
            std::int32_t v = 0;
            const auto *end = tok.data() + tok.size();
            auto [ptr, ec] = std::from_chars(tok.data(), end, v);
            if (tok.empty() || ec != std::errc{} || ptr != end)
            {
                throw ParseError(line, std::string("malformed operand list: ") + what + " must be an integer, got '" +
                                           std::string(tok) + "'");
            }
            return v;
        }

        // Accepts "0.3", ".3", "1", "1.0".
        inline double parse_probability(std::string_view tok, std::size_t line)
        {
            std::string buf(tok);
            if (!buf.empty() && buf[0] == '.')
            {
                buf.insert(buf.begin(), '0');
            }
            double v = 0.0;
            const auto *end = buf.data() + buf.size();
            auto [ptr, ec] = std::from_chars(buf.data(), end, v, std::chars_format::fixed);
            if (buf.empty() || ec != std::errc{} || ptr != end)
            {
                throw ParseError(line, "malformed operand list: bad probability '" + std::string(tok) + "'");
            }
            if (!(v >= 0.0 && v <= 1.0))
            {
                throw ParseError(line, "probability out of range [0,1]: '" + std::string(tok) + "'");
            }
            return v;
        }

        inline void expect_operand_count(const std::vector<std::string_view> &ops, std::size_t lo, std::size_t hi,
                                         std::size_t line, const char *kw)
        {
            if (ops.size() < lo || ops.size() > hi)
            {
                throw ParseError(line, std::string("malformed operand list: ") + kw + " takes " + std::to_string(lo) +
                                           ".." + std::to_string(hi) + " operands, got " + std::to_string(ops.size()));
            }
        }

        inline std::string format_probability(double p)
        {
            char buf[64];
            auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), p, std::chars_format::fixed);
            std::string s(buf, ptr);
            if (s.find('.') == std::string::npos && s.find('e') == std::string::npos)
            {
                s += ".0";
            }
            return s;
        }

        inline BlockOp parse_block(const std::string &kw, std::string_view operands, std::size_t line)
        {
            const auto ops = split_operands(operands);
            if (kw == "GENERATE")
            {
                expect_operand_count(ops, 1, 5, line, "GENERATE");
                Generate g;
                g.mean = parse_unsigned(ops[0], line, "GENERATE mean");
                if (ops.size() > 1 && !ops[1].empty())
                {
                    g.half_range = parse_unsigned(ops[1], line, "GENERATE half-range");
                }
                if (ops.size() > 2 && !ops[2].empty())
                {
                    g.offset = parse_unsigned(ops[2], line, "GENERATE offset");
                }
                if (ops.size() > 3 && !ops[3].empty())
                {
                    g.limit = parse_unsigned(ops[3], line, "GENERATE limit");
                }
                if (ops.size() > 4 && !ops[4].empty())
                {
                    g.priority = parse_signed32(ops[4], line, "GENERATE priority");
                }
                if (g.half_range > g.mean)
                {
                    throw ParseError(line, "GENERATE half-range exceeds mean");
                }
                return g;
            }
            if (kw == "ADVANCE")
            {
                expect_operand_count(ops, 0, 2, line, "ADVANCE");
                Advance a;
                if (!ops.empty() && !ops[0].empty())
                {
                    a.mean = parse_unsigned(ops[0], line, "ADVANCE mean");
                }
                if (ops.size() > 1 && !ops[1].empty())
                {
                    a.half_range = parse_unsigned(ops[1], line, "ADVANCE half-range");
                }
                if (a.half_range > a.mean)
                {
                    throw ParseError(line, "ADVANCE half-range exceeds mean");
                }
                return a;
            }
            if (kw == "TRANSFER")
            {
                expect_operand_count(ops, 2, 2, line, "TRANSFER");
                Transfer t;
                t.probability = ops[0].empty() ? 1.0 : parse_probability(ops[0], line);
                if (!is_identifier(ops[1]))
                {
                    throw ParseError(line, "malformed operand list: TRANSFER target must be a label, got '" +
                                               std::string(ops[1]) + "'");
                }
                t.target = std::string(ops[1]);
                return t;
            }
            if (kw == "TERMINATE")
            {
                expect_operand_count(ops, 0, 1, line, "TERMINATE");
                Terminate t;
                if (!ops.empty() && !ops[0].empty())
                {
                    t.decrement = parse_unsigned(ops[0], line, "TERMINATE decrement");
                }
                return t;
            }
            throw ParseError(line, "unknown block keyword '" + kw + "'");
        }

        inline bool ends_flow(const BlockOp &op)
        {
            if (std::holds_alternative<Terminate>(op))
            {
                return true;
            }
            if (const auto *t = std::get_if<Transfer>(&op))
            {
                return t->probability >= 1.0;
            }
            return false;
        }
    }

    // Checks everything the parser guarantees. Throws ParseError; the line is the
    // offending block's source line when known.
    inline void validate_program(ModelProgram &program, std::size_t last_line = 1)
    {
        if (program.partitions.empty())
        {
            throw ParseError(last_line, "empty model");
        }

        std::map<std::string, std::size_t> names;
        program.labels.clear();
        for (PartitionIndex p = 0; p < program.partitions.size(); ++p)
        {
            const auto &part = program.partitions[p];
            if (!detail::is_identifier(part.name))
            {
                throw ParseError(last_line, "invalid partition name '" + part.name + "'");
            }
            if (!names.emplace(part.name, p).second)
            {
                throw ParseError(last_line, "duplicate partition name '" + part.name + "'");
            }
            if (part.termination_start < 1)
            {
                throw ParseError(last_line, "termination counter must be >= 1 in partition '" + part.name + "'");
            }
            for (BlockIndex b = 0; b < part.blocks.size(); ++b)
            {
                const auto &blk = part.blocks[b];
                if (blk.label)
                {
                    if (!detail::is_identifier(*blk.label) || detail::is_keyword(*blk.label))
                    {
                        throw ParseError(blk.line, "invalid label '" + *blk.label + "'");
                    }
                    if (!program.labels.emplace(*blk.label, Location{p, b}).second)
                    {
                        throw ParseError(blk.line, "duplicate label '" + *blk.label + "'");
                    }
                }
            }
        }

        for (const auto &part : program.partitions)
        {
            if (part.blocks.empty())
            {
                throw ParseError(last_line, "partition '" + part.name + "' has no blocks");
            }
            const bool has_generate = std::any_of(part.blocks.begin(), part.blocks.end(), [](const Block &b)
                                                  { return std::holds_alternative<Generate>(b.op); });
            if (!has_generate)
            {
                throw ParseError(part.blocks.front().line, "partition '" + part.name + "' has no GENERATE block");
            }
            for (std::size_t b = 0; b < part.blocks.size(); ++b)
            {
                const auto &blk = part.blocks[b];
                if (const auto *t = std::get_if<Transfer>(&blk.op))
                {
                    auto it = program.labels.find(t->target);
                    if (it == program.labels.end())
                    {
                        throw ParseError(blk.line, "unresolved label '" + t->target + "'");
                    }
                    if (std::holds_alternative<Generate>(program.block_at(it->second).op))
                    {
                        throw ParseError(blk.line, "TRANSFER target '" + t->target + "' is a GENERATE block");
                    }
                }
                if (b > 0 && std::holds_alternative<Generate>(blk.op) && !detail::ends_flow(part.blocks[b - 1].op))
                {
                    throw ParseError(blk.line, "transactions would fall into GENERATE block");
                }
            }
            if (!detail::ends_flow(part.blocks.back().op))
            {
                throw ParseError(part.blocks.back().line,
                                 "partition '" + part.name + "' does not end with TERMINATE or an unconditional TRANSFER");
            }
        }
    }

    inline ModelProgram parse_model(std::string_view source)
    {
        ModelProgram program;
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos <= source.size())
        {
            auto nl = source.find('\n', pos);
            if (nl == std::string_view::npos)
            {
                nl = source.size();
            }
            auto line = source.substr(pos, nl - pos);
            pos = nl + 1;
            ++line_no;

            line = detail::trim(line);
            if (line.empty() || line.front() == '*')
            {
                if (nl == source.size())
                {
                    break;
                }
                continue;
            }

            // [label] KEYWORD operands
            auto first_end = line.find_first_of(" \t");
            auto first = line.substr(0, first_end);
            auto rest = first_end == std::string_view::npos ? std::string_view{} : detail::trim(line.substr(first_end));

            std::optional<std::string> label;
            std::string kw = detail::upper(first);
            if (!detail::is_keyword(first))
            {
                if (!detail::is_identifier(first))
                {
                    throw ParseError(line_no, "unknown block keyword '" + std::string(first) + "'");
                }
                label = std::string(first);
                if (rest.empty())
                {
                    throw ParseError(line_no, "label '" + *label + "' without a block");
                }
                auto kw_end = rest.find_first_of(" \t");
                const auto second = rest.substr(0, kw_end);
                kw = detail::upper(second);
                rest = kw_end == std::string_view::npos ? std::string_view{} : detail::trim(rest.substr(kw_end));
                if (!detail::is_keyword(kw))
                {
                    // An operand-like second token means the first was meant as the keyword.
                    throw ParseError(line_no, "unknown block keyword '" +
                                                  (detail::is_identifier(second) ? std::string(second) : *label) + "'");
                }
            }

            if (kw == "PARTITION")
            {
                if (label)
                {
                    throw ParseError(line_no, "PARTITION statement cannot carry a label");
                }
                const auto ops = detail::split_operands(rest);
                detail::expect_operand_count(ops, 2, 2, line_no, "PARTITION");
                if (!detail::is_identifier(ops[0]))
                {
                    throw ParseError(line_no, "malformed operand list: bad partition name '" + std::string(ops[0]) + "'");
                }
                for (const auto &p : program.partitions)
                {
                    if (p.name == ops[0])
                    {
                        throw ParseError(line_no, "duplicate partition name '" + std::string(ops[0]) + "'");
                    }
                }
                ModelPartition part;
                part.name = std::string(ops[0]);
                const auto start = detail::parse_unsigned(ops[1], line_no, "termination counter");
                if (start < 1 || start > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
                {
                    throw ParseError(line_no, "termination counter must be >= 1");
                }
                part.termination_start = static_cast<std::int64_t>(start);
                program.partitions.push_back(std::move(part));
            }
            else
            {
                if (program.partitions.empty())
                {
                    throw ParseError(line_no, "block statement before the first PARTITION");
                }
                Block blk{label, detail::parse_block(kw, rest, line_no), line_no};
                if (blk.label)
                {
                    if (program.labels.count(*blk.label))
                    {
                        throw ParseError(line_no, "duplicate label '" + *blk.label + "'");
                    }
                    program.labels.emplace(*blk.label,
                                           Location{static_cast<PartitionIndex>(program.partitions.size() - 1),
                                                    static_cast<BlockIndex>(program.partitions.back().blocks.size())});
                }
                program.partitions.back().blocks.push_back(std::move(blk));
            }

            if (nl == source.size())
            {
                break;
            }
        }

        validate_program(program, std::max<std::size_t>(line_no, 1));
        return program;
    }

    inline std::string dump_block(const Block &blk)
    {
        std::ostringstream os;
        if (blk.label)
        {
            os << *blk.label << ' ';
        }
        os << block_keyword(blk.op) << ' ';
        std::visit(
            [&](const auto &op)
            {
                using T = std::decay_t<decltype(op)>;
                if constexpr (std::is_same_v<T, Generate>)
                {
                    std::vector<std::string> fields{std::to_string(op.mean), std::to_string(op.half_range),
                                                    op.offset ? std::to_string(*op.offset) : "",
                                                    op.limit ? std::to_string(*op.limit) : "",
                                                    op.priority != 0 ? std::to_string(op.priority) : ""};
                    while (fields.size() > 2 && fields.back().empty())
                    {
                        fields.pop_back();
                    }
                    for (std::size_t i = 0; i < fields.size(); ++i)
                    {
                        os << (i ? "," : "") << fields[i];
                    }
                }
                else if constexpr (std::is_same_v<T, Advance>)
                {
                    os << op.mean << ',' << op.half_range;
                }
                else if constexpr (std::is_same_v<T, Transfer>)
                {
                    os << detail::format_probability(op.probability) << ',' << op.target;
                }
                else
                {
                    os << op.decrement;
                }
            },
            blk.op);
        return os.str();
    }

    // Canonical text; parse_model(dump_model(p)) == p.
    inline std::string dump_model(const ModelProgram &program)
    {
        std::ostringstream os;
        for (const auto &part : program.partitions)
        {
            os << "PARTITION " << part.name << ',' << part.termination_start << '\n';
            for (const auto &blk : part.blocks)
            {
                os << dump_block(blk) << '\n';
            }
        }
        return os.str();
    }

    // Human-readable listing with block coordinates and the label table.
    inline std::string describe_program(const ModelProgram &program)
    {
        std::ostringstream os;
        for (PartitionIndex p = 0; p < program.partitions.size(); ++p)
        {
            const auto &part = program.partitions[p];
            os << "partition " << p << " " << part.name << " (termination counter " << part.termination_start << ")\n";
            for (BlockIndex b = 0; b < part.blocks.size(); ++b)
            {
                os << "  [" << p << ":" << b << "] " << dump_block(part.blocks[b]) << '\n';
            }
        }
        os << "labels:\n";
        for (const auto &[name, loc] : program.labels)
        {
            os << "  " << name << " -> " << program.partitions[loc.partition].name << " [" << loc.partition << ":"
               << loc.block << "]\n";
        }
        return os.str();
    }
}
