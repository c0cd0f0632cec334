/*++

    Simplified BBR congestion control. Every tunable of the controller is a
    file-scope constant so that UPDATE VARIABLE blocks can retarget it.

    Note: braces inside comments such as "{ not code }" must be ignored.

--*/

#include "bbr.h"

#define GAIN_UNIT 256
#define kMinCwndInMss 4
#define kMicroSecsInSec 1000000
#define BW_UNIT 8
#define kQuantaFactor 3
#define CXPLAT_MIN(a, b) (((a) < (b)) ? (a) : (b))
#define CXPLAT_MAX(a, b) (((a) > (b)) ? (a) : (b))
#define CXPLAT_DBG_ASSERT(exp)
#define _IRQL_requires_max_(level)
#define _In_

typedef enum BBR_STATE {
    BBR_STATE_STARTUP,
    BBR_STATE_DRAIN,
    BBR_STATE_PROBE_BW,
    BBR_STATE_PROBE_RTT
} BBR_STATE;

typedef enum RECOVERY_STATE {
    RECOVERY_STATE_NOT_RECOVERY = 0,
    RECOVERY_STATE_CONSERVATIVE = 1,
    RECOVERY_STATE_GROWTH = 2,
} RECOVERY_STATE;

//
// The startup pacing gain, (2 / ln(2)) scaled by GAIN_UNIT.
//
const uint32_t kHighGain = GAIN_UNIT * 2885 / 1000 + 1;

//
// Bandwidth must grow by this factor per round while in startup.
//
const uint32_t kStartupGrowthTarget = GAIN_UNIT * 5 / 4;

const uint32_t kDrainGain = GAIN_UNIT * 1000 / 2885;

const uint32_t kCwndGain = GAIN_UNIT * 2;

const uint32_t kInitialWindowPackets = 16;

const uint8_t kStartupSlowGrowRoundLimit = 3;

const uint32_t kPacingGain[BBR_PACING_CYCLE_LENGTH] = {
    GAIN_UNIT * 5 / 4,
    GAIN_UNIT * 3 / 4,
    GAIN_UNIT, GAIN_UNIT, GAIN_UNIT,
    GAIN_UNIT, GAIN_UNIT, GAIN_UNIT
};

static const char* kStateNames[] = { "STARTUP", "DRAIN", "PROBE_BW", "PROBE_RTT" };

uint64_t
BbrCongestionControlGetBandwidth(
    _In_ const QUIC_CONGESTION_CONTROL* Cc
    );

_IRQL_requires_max_(DISPATCH_LEVEL)
uint64_t
BbrCongestionControlGetBandwidth(
    _In_ const QUIC_CONGESTION_CONTROL* Cc
    )
{
    const BBR_BANDWIDTH_FILTER* Filter = &Cc->Bbr.BandwidthFilter;
    uint64_t Max = Filter->Samples[0];
    for (int i = 1; i < 3; ++i) {
        if (Filter->Samples[i] > Max) {
            Max = Filter->Samples[i];
        }
    }
    return Max;
}

_IRQL_requires_max_(DISPATCH_LEVEL)
uint32_t
BbrCongestionControlGetTargetCwnd(
    _In_ QUIC_CONGESTION_CONTROL* Cc,
    _In_ uint32_t Gain
    )
{
    QUIC_CONGESTION_CONTROL_BBR* Bbr = &Cc->Bbr;
    uint64_t BandwidthEst = BbrCongestionControlGetBandwidth(Cc);

    if (!BandwidthEst || Bbr->MinRtt == UINT32_MAX) {
        return (uint32_t)(Gain * Bbr->InitialCongestionWindow / GAIN_UNIT);
    }

    uint64_t Bdp = BandwidthEst * Bbr->MinRtt / kMicroSecsInSec / BW_UNIT;
    uint64_t TargetCwnd = (Bdp * Gain / GAIN_UNIT) + (kQuantaFactor * Bbr->SendQuantum);

    return (uint32_t)TargetCwnd;
}

_IRQL_requires_max_(DISPATCH_LEVEL)
void
BbrCongestionControlOnDataSent(
    _In_ QUIC_CONGESTION_CONTROL* Cc,
    _In_ uint32_t NumRetransmittableBytes
    )
{
    QUIC_CONGESTION_CONTROL_BBR* Bbr = &Cc->Bbr;

    if (!Bbr->BytesInFlight && Bbr->BandwidthFilter.AppLimited) {
        Bbr->ExitingQuiescence = 1;
    }

    Bbr->BytesInFlight += NumRetransmittableBytes;
    if (Bbr->BytesInFlightMax < Bbr->BytesInFlight) {
        Bbr->BytesInFlightMax = Bbr->BytesInFlight;
    }

    if (Bbr->Exemptions > 0) {
        --Bbr->Exemptions;
    }
}

_IRQL_requires_max_(DISPATCH_LEVEL)
void
BbrCongestionControlSetSendQuantum(
    _In_ QUIC_CONGESTION_CONTROL* Cc
    )
{
    QUIC_CONGESTION_CONTROL_BBR *Bbr = &Cc->Bbr;
    const uint16_t DatagramPayloadLength = 1200;

    uint64_t Bandwidth = BbrCongestionControlGetBandwidth(Cc);

    uint64_t PacingRate = Bandwidth * Bbr->PacingGain / GAIN_UNIT;

    if (PacingRate < 1200 * 1000) {
        Bbr->SendQuantum = DatagramPayloadLength;
    } else if (PacingRate < 24 * 1000 * 1000) {
        Bbr->SendQuantum = DatagramPayloadLength * 2;
    } else {
        Bbr->SendQuantum = CXPLAT_MIN(PacingRate * 1000 / kMicroSecsInSec, 64 * 1024);
    }
}

_IRQL_requires_max_(DISPATCH_LEVEL)
void
BbrCongestionControlUpdateCongestionWindow(
    _In_ QUIC_CONGESTION_CONTROL* Cc,
    _In_ uint64_t TotalBytesAcked,
    _In_ uint64_t AckedBytes
    )
{
    QUIC_CONGESTION_CONTROL_BBR* Bbr = &Cc->Bbr;
    const uint16_t DatagramPayloadLength = 1200;

    if (Bbr->BbrState == BBR_STATE_PROBE_RTT) {
        return;
    }

    BbrCongestionControlSetSendQuantum(Cc);

    uint64_t TargetCwnd = BbrCongestionControlGetTargetCwnd(Cc, Bbr->CwndGain);
    uint32_t MinCongestionWindow = kMinCwndInMss * DatagramPayloadLength;

    if (Bbr->BtlbwFound) {
        Bbr->CongestionWindow = (uint32_t)CXPLAT_MIN(TargetCwnd, Bbr->CongestionWindow + AckedBytes);
    } else if (Bbr->CongestionWindow < TargetCwnd || TotalBytesAcked < Bbr->InitialCongestionWindow) {
        Bbr->CongestionWindow += (uint32_t)AckedBytes;
    }

    Bbr->CongestionWindow = CXPLAT_MAX(Bbr->CongestionWindow, MinCongestionWindow);
}

_IRQL_requires_max_(DISPATCH_LEVEL)
void
BbrCongestionControlOnDataLost(
    _In_ QUIC_CONGESTION_CONTROL* Cc,
    _In_ const QUIC_LOSS_EVENT* LossEvent
    )
{
    QUIC_CONGESTION_CONTROL_BBR* Bbr = &Cc->Bbr;
    const uint16_t DatagramPayloadLength = 1200;

    CXPLAT_DBG_ASSERT(Bbr->BytesInFlight >= LossEvent->NumRetransmittableBytes);
    Bbr->BytesInFlight -= LossEvent->NumRetransmittableBytes;

    uint32_t RecoveryWindow = Bbr->RecoveryWindow;
    uint32_t MinCongestionWindow = kMinCwndInMss * DatagramPayloadLength;

    if (Bbr->RecoveryState == RECOVERY_STATE_NOT_RECOVERY) {
        Bbr->RecoveryState = RECOVERY_STATE_CONSERVATIVE;
        RecoveryWindow = Bbr->BytesInFlight;
    }

    if (LossEvent->PersistentCongestion) {
        RecoveryWindow = MinCongestionWindow;
    } else {
        RecoveryWindow = RecoveryWindow > LossEvent->NumRetransmittableBytes + MinCongestionWindow
            ? RecoveryWindow - LossEvent->NumRetransmittableBytes
            : MinCongestionWindow;
    }

    Bbr->RecoveryWindow = RecoveryWindow;
}

_IRQL_requires_max_(PASSIVE_LEVEL)
void
BbrCongestionControlInitialize(
    QUIC_CONGESTION_CONTROL* Cc,
    uint32_t DatagramPayloadLength
    )
{
    QUIC_CONGESTION_CONTROL_BBR* Bbr = &Cc->Bbr;

    Cc->Name = "BBR {v1}";
    Bbr->InitialCongestionWindowPackets = kInitialWindowPackets;
    Bbr->InitialCongestionWindow = DatagramPayloadLength * Bbr->InitialCongestionWindowPackets;
    Bbr->CongestionWindow = Bbr->InitialCongestionWindow;
    Bbr->BytesInFlightMax = Bbr->CongestionWindow / 2;
    Bbr->BbrState = BBR_STATE_STARTUP;
    Bbr->RecoveryState = RECOVERY_STATE_NOT_RECOVERY;
    Bbr->CwndGain = kHighGain;
    Bbr->PacingGain = kHighGain;
    Bbr->MinRtt = UINT32_MAX;
    Bbr->PacingCycleIndex = 0;
    Bbr->SendQuantum = 0;
    (void)kStateNames;
    (void)kPacingGain;
}
