#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

namespace gpsstw
{
    // Raw LP sensor readings at one instant.
    struct SensorSnapshot
    {
        double wall_clock_ms = 0.0;
        std::uint64_t committed_moves_cum = 0;
        std::uint64_t rolled_back_moves_cum = 0;
        std::uint64_t rollback_count_cum = 0;
        std::uint64_t uncommitted_moves_now = 0;
        std::uint64_t messages_sent_cum = 0;
        std::uint64_t messages_received_cum = 0;
    };

    // State descriptor of an LP over one control interval.
    struct IndicatorVector
    {
        static constexpr std::size_t kDims = 6;

        double committed_rate = 0.0;  // performance indicator, moves/s
        double avg_uncommitted = 0.0; // controllable indicator, moves
        double rollback_rate = 0.0;
        double rolled_back_fraction = 0.0;
        double send_rate = 0.0;
        double receive_rate = 0.0;

        std::array<double, kDims> as_array() const
        {
            return {committed_rate, avg_uncommitted, rollback_rate, rolled_back_fraction, send_rate, receive_rate};
        }

        static IndicatorVector from_array(const std::array<double, kDims> &a)
        {
            return {a[0], a[1], a[2], a[3], a[4], a[5]};
        }

        friend bool operator==(const IndicatorVector &, const IndicatorVector &) = default;
    };

    struct LpccConfig
    {
        double interval_ms = 500.0;
        double epsilon = 0.1;       // merge radius in normalized space
        std::size_t capacity = 256; // K
        double delta = 0.05;        // required relative improvement of committed_rate
        std::uint64_t floor = 16;   // minimum actuator limit
        // When false only the two primary indicators are used; the similarity
        // search then has no dimensions left and ties on the best performer.
        bool extra_indicators = true;
        // Sub-samples of the uncommitted count per interval (endpoints included).
        std::size_t subsamples = 8;
    };

    // Actuator: optional limit on uncommitted transaction moves.
    struct Actuator
    {
        std::optional<std::uint64_t> limit;
        friend bool operator==(const Actuator &, const Actuator &) = default;
    };

    // Rates over [prev, curr]; avg_uncommitted is the mean of `uncommitted_samples`
    // (callers pass at least the two endpoint readings).
    inline IndicatorVector indicators_from(const SensorSnapshot &prev, const SensorSnapshot &curr,
                                           const std::vector<std::uint64_t> &uncommitted_samples = {})
    {
        IndicatorVector v;
        const double secs = (curr.wall_clock_ms - prev.wall_clock_ms) / 1000.0;
        if (!(secs > 0.0))
        {
            return v;
        }
        auto rate = [secs](std::uint64_t a, std::uint64_t b) { return b >= a ? static_cast<double>(b - a) / secs : 0.0; };
        v.committed_rate = rate(prev.committed_moves_cum, curr.committed_moves_cum);
        v.rollback_rate = rate(prev.rollback_count_cum, curr.rollback_count_cum);
        v.send_rate = rate(prev.messages_sent_cum, curr.messages_sent_cum);
        v.receive_rate = rate(prev.messages_received_cum, curr.messages_received_cum);
        const auto committed = static_cast<double>(curr.committed_moves_cum - prev.committed_moves_cum);
        const auto rolled = static_cast<double>(curr.rolled_back_moves_cum - prev.rolled_back_moves_cum);
        v.rolled_back_fraction = committed + rolled > 0.0 ? rolled / (committed + rolled) : 0.0;
        if (uncommitted_samples.empty())
        {
            v.avg_uncommitted =
                (static_cast<double>(prev.uncommitted_moves_now) + static_cast<double>(curr.uncommitted_moves_now)) / 2.0;
        }
        else
        {
            double sum = 0.0;
            for (auto s : uncommitted_samples)
            {
                sum += static_cast<double>(s);
            }
            v.avg_uncommitted = sum / static_cast<double>(uncommitted_samples.size());
        }
        return v;
    }

    // Bounded history of indicator vectors, clustered by proximity.
    class ClusterSpace
    {
    public:
        struct Centroid
        {
            IndicatorVector v;
            std::uint64_t hits = 1;
            std::uint64_t last_update = 0;
        };

        explicit ClusterSpace(LpccConfig cfg = {}) : m_cfg(cfg)
        {
            m_min.fill(std::numeric_limits<double>::infinity());
            m_max.fill(-std::numeric_limits<double>::infinity());
        }

        const std::vector<Centroid> &centroids() const noexcept { return m_centroids; }
        std::size_t size() const noexcept { return m_centroids.size(); }
        const LpccConfig &config() const noexcept { return m_cfg; }

        // Euclidean distance over min-max normalized dimensions selected by `mask`.
        double distance(const IndicatorVector &a, const IndicatorVector &b,
                        const std::array<bool, IndicatorVector::kDims> &mask) const
        {
            const auto x = a.as_array();
            const auto y = b.as_array();
            double sum = 0.0;
            for (std::size_t d = 0; d < IndicatorVector::kDims; ++d)
            {
                if (!mask[d])
                {
                    continue;
                }
                const double span = m_max[d] - m_min[d];
                const double diff = span > 0.0 ? (x[d] - y[d]) / span : 0.0;
                sum += diff * diff;
            }
            return std::sqrt(sum);
        }

        std::array<bool, IndicatorVector::kDims> all_dims() const
        {
            std::array<bool, IndicatorVector::kDims> m{};
            m.fill(true);
            if (!m_cfg.extra_indicators)
            {
                for (std::size_t d = 2; d < IndicatorVector::kDims; ++d)
                {
                    m[d] = false;
                }
            }
            return m;
        }

        // Dimensions used when looking for a similar state: everything except the
        // performance and the controlled indicator.
        std::array<bool, IndicatorVector::kDims> similarity_dims() const
        {
            auto m = all_dims();
            m[0] = false;
            m[1] = false;
            return m;
        }

        void insert(const IndicatorVector &v)
        {
            ++m_stamp;
            const auto a = v.as_array();
            for (std::size_t d = 0; d < IndicatorVector::kDims; ++d)
            {
                m_min[d] = std::min(m_min[d], a[d]);
                m_max[d] = std::max(m_max[d], a[d]);
            }

            Centroid *nearest = nullptr;
            double best = std::numeric_limits<double>::infinity();
            const auto mask = all_dims();
            for (auto &c : m_centroids)
            {
                const double dist = distance(c.v, v, mask);
                if (dist < best)
                {
                    best = dist;
                    nearest = &c;
                }
            }

            if (nearest && best <= m_cfg.epsilon)
            {
                auto ca = nearest->v.as_array();
                const double w = static_cast<double>(nearest->hits);
                for (std::size_t d = 0; d < IndicatorVector::kDims; ++d)
                {
                    ca[d] = (ca[d] * w + a[d]) / (w + 1.0);
                }
                nearest->v = IndicatorVector::from_array(ca);
                ++nearest->hits;
                nearest->last_update = m_stamp;
                return;
            }

            m_centroids.push_back(Centroid{v, 1, m_stamp});
            if (m_centroids.size() > m_cfg.capacity)
            {
                auto oldest = std::min_element(m_centroids.begin(), m_centroids.end(),
                                               [](const Centroid &x, const Centroid &y)
                                               { return x.last_update < y.last_update; });
                m_centroids.erase(oldest);
            }
        }

    private:
        LpccConfig m_cfg;
        std::vector<Centroid> m_centroids;
        std::array<double, IndicatorVector::kDims> m_min{};
        std::array<double, IndicatorVector::kDims> m_max{};
        std::uint64_t m_stamp = 0;
    };

    inline ClusterSpace cluster_insert(ClusterSpace space, const IndicatorVector &v)
    {
        space.insert(v);
        return space;
    }

    // Most similar past state that performed better than `current`; unset if none.
    inline Actuator actuator_search(const ClusterSpace &space, const IndicatorVector &current)
    {
        const auto &cfg = space.config();
        const double threshold = current.committed_rate * (1.0 + cfg.delta);
        const auto mask = space.similarity_dims();
        const ClusterSpace::Centroid *pick = nullptr;
        double best = std::numeric_limits<double>::infinity();
        for (const auto &c : space.centroids())
        {
            if (!(c.v.committed_rate > threshold))
            {
                continue;
            }
            const double dist = space.distance(c.v, current, mask);
            // Ties go to the better performer.
            if (dist < best || (dist == best && pick && c.v.committed_rate > pick->v.committed_rate))
            {
                best = dist;
                pick = &c;
            }
        }
        if (!pick)
        {
            return Actuator{};
        }
        const auto limit = static_cast<std::uint64_t>(std::llround(std::max(0.0, pick->v.avg_uncommitted)));
        return Actuator{std::max(cfg.floor, limit)};
    }

    // Control component of one LP. Reads only its own LP's sensors.
    class Lpcc
    {
    public:
        explicit Lpcc(LpccConfig cfg = {}) : m_cfg(cfg), m_space(cfg) {}

        const LpccConfig &config() const noexcept { return m_cfg; }
        const ClusterSpace &space() const noexcept { return m_space; }
        const Actuator &actuator() const noexcept { return m_actuator; }
        const std::optional<IndicatorVector> &last_indicators() const noexcept { return m_last; }
        std::uint64_t ticks() const noexcept { return m_ticks; }

        // Between ticks; feeds the average-uncommitted indicator.
        void sample(std::uint64_t uncommitted) { m_samples.push_back(uncommitted); }

        // One control interval. The first call only records the baseline snapshot.
        Actuator tick(const SensorSnapshot &now)
        {
            if (!m_prev)
            {
                m_prev = now;
                m_samples.assign(1, now.uncommitted_moves_now);
                return m_actuator;
            }
            m_samples.push_back(now.uncommitted_moves_now);
            const auto v = indicators_from(*m_prev, now, m_samples);
            m_space.insert(v);
            m_actuator = actuator_search(m_space, v);
            m_last = v;
            ++m_ticks;
            m_prev = now;
            m_samples.assign(1, now.uncommitted_moves_now);
            return m_actuator;
        }

    private:
        LpccConfig m_cfg;
        ClusterSpace m_space;
        Actuator m_actuator;
        std::optional<SensorSnapshot> m_prev;
        std::optional<IndicatorVector> m_last;
        std::vector<std::uint64_t> m_samples;
        std::uint64_t m_ticks = 0;
    };

    struct LpccTickResult
    {
        Actuator actuator;
        std::optional<IndicatorVector> indicators;
    };

    // Functional form: indicators -> insert -> search.
    inline LpccTickResult lpcc_tick(const SensorSnapshot &now, ClusterSpace &space, std::optional<SensorSnapshot> &prev,
                                    const std::vector<std::uint64_t> &samples = {})
    {
        if (!prev)
        {
            prev = now;
            return {};
        }
        const auto v = indicators_from(*prev, now, samples);
        space.insert(v);
        prev = now;
        return {actuator_search(space, v), v};
    }
}
